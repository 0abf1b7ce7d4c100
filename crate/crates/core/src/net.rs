//! The fusion network shared by teacher and student: a four-level
//! dual-stream encoder built from spatial (windowed) and transposed
//! (channel) self-attention blocks, a spatial-channel cross fusion module
//! per level, optional text-conditioned feature modulation, and a decoder
//! with pixel-shuffle upsampling and progressive refinement.
//!
//! Blocks follow `x + LN(MHA(x))` with no feed-forward sub-layer. The
//! teacher (48 base channels) enables text modulation; the student (16)
//! drops it and consumes the raw fused features.

use std::collections::BTreeMap;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use candle_nn::{
    conv2d, conv2d_no_bias, linear, linear_no_bias, ops::softmax, Conv2d, Conv2dConfig, Linear,
    Module, VarBuilder, VarMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ops::reflect_pad;

pub const LEVELS: usize = 4;

/// Architecture hyper-parameters. Channel width doubles and spatial size
/// halves at each of the four levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub depths: [usize; LEVELS],
    pub heads: [usize; LEVELS],
    pub window: usize,
    pub text_dim: usize,
    pub with_text: bool,
}

impl NetConfig {
    pub fn teacher() -> Self {
        Self {
            base_channels: 48,
            levels: LEVELS,
            depths: [2, 2, 2, 4],
            heads: [1, 2, 4, 8],
            window: 8,
            text_dim: crate::textprior::DEFAULT_TEXT_DIM,
            with_text: true,
        }
    }

    pub fn student() -> Self {
        Self {
            base_channels: 16,
            with_text: false,
            ..Self::teacher()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels != LEVELS {
            return Err(Error::InvalidConfig(format!(
                "levels is fixed at {LEVELS}, got {}",
                self.levels
            )));
        }
        if self.base_channels == 0 || self.window == 0 {
            return Err(Error::InvalidConfig(
                "base_channels and window must be positive".into(),
            ));
        }
        for l in 0..LEVELS {
            if self.depths[l] == 0 {
                return Err(Error::InvalidConfig(format!("depths[{l}] must be >= 1")));
            }
            if self.heads[l] == 0 || self.channels(l) % self.heads[l] != 0 {
                return Err(Error::InvalidConfig(format!(
                    "channels at level {l} ({}) not divisible by heads ({})",
                    self.channels(l),
                    self.heads[l]
                )));
            }
        }
        if self.with_text && self.text_dim == 0 {
            return Err(Error::InvalidConfig("text_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Inputs are reflect-padded to multiples of this (three halvings keep
    /// every level divisible by the attention window).
    pub fn pad_multiple(&self) -> usize {
        self.window << (LEVELS - 1)
    }
}

/// Channel-wise layer normalization with affine parameters, composed from
/// primitive ops so gradients flow (the fused candle layer-norm kernel has
/// no backward pass).
#[derive(Debug, Clone)]
struct ChannelNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl ChannelNorm {
    fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", candle_nn::init::Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", candle_nn::init::Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    /// Normalizes over the last dimension of (B, T, C).
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dims()[x.dims().len() - 1];
        let mean = (x.sum_keepdim(D::Minus1)? / c as f64)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / c as f64)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

fn layer_norm_2d(x: &Tensor, ln: &ChannelNorm) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let t = x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
    let t = ln.forward(&t)?;
    Ok(t.transpose(1, 2)?.reshape((b, c, h, w))?)
}

fn l2_normalize_last(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}

/// Window-partitioned multi-head self-attention over spatial positions.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    window: usize,
}

impl WindowAttention {
    fn new(dim: usize, heads: usize, window: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            qkv: linear_no_bias(dim, dim * 3, vb.pp("qkv"))?,
            proj: linear_no_bias(dim, dim, vb.pp("proj"))?,
            heads,
            window,
        })
    }

    /// (B, C, H, W) -> (B * n_windows, window^2, C)
    fn to_windows(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let win = self.window;
        if h % win != 0 || w % win != 0 {
            return Err(Error::InvalidConfig(format!(
                "spatial dims {h}x{w} not divisible by window {win}"
            )));
        }
        let (nh, nw) = (h / win, w / win);
        Ok(x.reshape((b, c, nh, win, nw, win))?
            .permute((0, 2, 4, 3, 5, 1))?
            .contiguous()?
            .reshape((b * nh * nw, win * win, c))?)
    }

    fn from_windows(&self, xw: &Tensor, b: usize, c: usize, h: usize, w: usize) -> Result<Tensor> {
        let win = self.window;
        let (nh, nw) = (h / win, w / win);
        Ok(xw
            .reshape((b, nh, nw, win, win, c))?
            .permute((0, 5, 1, 3, 2, 4))?
            .contiguous()?
            .reshape((b, c, h, w))?)
    }

    fn qkv_heads(&self, xw: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (bn, t, c) = xw.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(xw)?
            .reshape((bn, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        Ok((qkv.i(0)?, qkv.i(1)?, qkv.i(2)?))
    }

    fn probs(&self, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let hd = q.dims()[q.dims().len() - 1];
        let scale = 1.0 / (hd as f64).sqrt();
        let logits = (q * scale)?.matmul(&k.transpose(D::Minus2, D::Minus1)?.contiguous()?)?;
        Ok(softmax(&logits, D::Minus1)?)
    }

    /// Softmax attention matrices for inspection, shape
    /// (B * n_windows, heads, window^2, window^2).
    pub fn attn_probs(&self, x: &Tensor) -> Result<Tensor> {
        let xw = self.to_windows(x)?;
        let (q, k, _) = self.qkv_heads(&xw)?;
        self.probs(&q, &k)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let xw = self.to_windows(x)?;
        let (bn, t, _) = xw.dims3()?;
        let (q, k, v) = self.qkv_heads(&xw)?;
        let probs = self.probs(&q, &k)?;
        let out = probs
            .matmul(&v.contiguous()?)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((bn, t, c))?;
        let out = self.proj.forward(&out)?;
        self.from_windows(&out, b, c, h, w)
    }
}

/// Transposed self-attention: the attention matrix lives on the channel
/// dimension, with L2-normalized queries/keys and a learnable per-head
/// temperature.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    qkv: Conv2d,
    proj: Conv2d,
    temperature: Tensor,
    heads: usize,
}

impl ChannelAttention {
    fn new(dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        let qkv = conv2d_no_bias(dim, dim * 3, 1, Conv2dConfig::default(), vb.pp("qkv"))?;
        let proj = conv2d_no_bias(dim, dim, 1, Conv2dConfig::default(), vb.pp("proj"))?;
        let temperature = vb.get_with_hints(
            (heads, 1, 1),
            "temperature",
            candle_nn::init::Init::Const(1.0),
        )?;
        Ok(Self {
            qkv,
            proj,
            temperature,
            heads,
        })
    }

    fn qkv_heads(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, c, h, w) = x.dims4()?;
        let hd = c / self.heads;
        let qkv = self.qkv.forward(x)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(1, i * c, c)?
                .contiguous()?
                .reshape((b, self.heads, hd, h * w))?)
        };
        Ok((split(0)?, split(1)?, split(2)?))
    }

    fn probs(&self, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let qn = l2_normalize_last(q)?;
        let kn = l2_normalize_last(k)?;
        let logits = qn
            .matmul(&kn.transpose(D::Minus2, D::Minus1)?.contiguous()?)?
            .broadcast_mul(&self.temperature)?;
        Ok(softmax(&logits, D::Minus1)?)
    }

    /// Channel attention matrices, shape (B, heads, C/heads, C/heads).
    pub fn attn_probs(&self, x: &Tensor) -> Result<Tensor> {
        let (q, k, _) = self.qkv_heads(x)?;
        self.probs(&q, &k)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (q, k, v) = self.qkv_heads(x)?;
        let probs = self.probs(&q, &k)?;
        let out = probs.matmul(&v.contiguous()?)?.reshape((b, c, h, w))?;
        Ok(self.proj.forward(&out)?)
    }
}

/// SSAB: `F + LN(MHA_spatial(F))`.
#[derive(Debug, Clone)]
pub struct SsabBlock {
    pub attn: WindowAttention,
    norm: ChannelNorm,
}

impl SsabBlock {
    fn new(dim: usize, heads: usize, window: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            attn: WindowAttention::new(dim, heads, window, vb.clone())?,
            norm: ChannelNorm::new(dim, vb.pp("norm"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.attn.forward(x)?;
        Ok((x + layer_norm_2d(&a, &self.norm)?)?)
    }
}

/// TSAB: `F + LN(MHA_channel(F))`.
#[derive(Debug, Clone)]
pub struct TsabBlock {
    pub attn: ChannelAttention,
    norm: ChannelNorm,
}

impl TsabBlock {
    fn new(dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            attn: ChannelAttention::new(dim, heads, vb.clone())?,
            norm: ChannelNorm::new(dim, vb.pp("norm"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.attn.forward(x)?;
        Ok((x + layer_norm_2d(&a, &self.norm)?)?)
    }
}

/// One encoder/decoder unit: sequential SSAB then TSAB.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ssab: SsabBlock,
    pub tsab: TsabBlock,
}

impl EncoderBlock {
    fn new(dim: usize, heads: usize, window: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            ssab: SsabBlock::new(dim, heads, window, vb.pp("ssab"))?,
            tsab: TsabBlock::new(dim, heads, vb.pp("tsab"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.tsab.forward(&self.ssab.forward(x)?)
    }
}

/// Spatial-channel cross fusion: each stream's windowed attention is paired
/// with the opposite stream's channel attention, concatenated, projected,
/// and the two projections summed.
#[derive(Debug, Clone)]
pub struct Scfm {
    vis_ssab: SsabBlock,
    ir_tsab: TsabBlock,
    ir_ssab: SsabBlock,
    vis_tsab: TsabBlock,
    cat_vis: Conv2d,
    cat_ir: Conv2d,
}

impl Scfm {
    fn new(dim: usize, heads: usize, window: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            vis_ssab: SsabBlock::new(dim, heads, window, vb.pp("vis_ssab"))?,
            ir_tsab: TsabBlock::new(dim, heads, vb.pp("ir_tsab"))?,
            ir_ssab: SsabBlock::new(dim, heads, window, vb.pp("ir_ssab"))?,
            vis_tsab: TsabBlock::new(dim, heads, vb.pp("vis_tsab"))?,
            cat_vis: conv2d(dim * 2, dim, 1, Conv2dConfig::default(), vb.pp("cat_vis"))?,
            cat_ir: conv2d(dim * 2, dim, 1, Conv2dConfig::default(), vb.pp("cat_ir"))?,
        })
    }

    pub fn forward(&self, f_vis: &Tensor, f_ir: &Tensor) -> Result<Tensor> {
        if f_vis.dims() != f_ir.dims() {
            return Err(Error::shape_mismatch(f_vis.dims(), f_ir.dims()));
        }
        let vis_hat = self.cat_vis.forward(&Tensor::cat(
            &[self.vis_ssab.forward(f_vis)?, self.ir_tsab.forward(f_ir)?],
            1,
        )?)?;
        let ir_hat = self.cat_ir.forward(&Tensor::cat(
            &[self.ir_ssab.forward(f_ir)?, self.vis_tsab.forward(f_vis)?],
            1,
        )?)?;
        Ok((vis_hat + ir_hat)?)
    }
}

/// Per-level text modulation: `(1 + gamma(T)) * F + beta(T)` with gamma and
/// beta from independent two-layer perceptrons. The output layers start at
/// zero, so modulation is the identity at initialization.
#[derive(Debug, Clone)]
pub struct TextMod {
    gamma1: Linear,
    gamma2: Linear,
    beta1: Linear,
    beta2: Linear,
}

impl TextMod {
    fn new(text_dim: usize, dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            gamma1: linear(text_dim, dim, vb.pp("gamma1"))?,
            gamma2: linear(dim, dim, vb.pp("gamma2"))?,
            beta1: linear(text_dim, dim, vb.pp("beta1"))?,
            beta2: linear(dim, dim, vb.pp("beta2"))?,
        })
    }

    /// `f` is (B, C, H, W); `t` is (B, text_dim).
    pub fn forward(&self, f: &Tensor, t: &Tensor) -> Result<Tensor> {
        let gamma = self.gamma2.forward(&self.gamma1.forward(t)?.relu()?)?;
        let beta = self.beta2.forward(&self.beta1.forward(t)?.relu()?)?;
        let gamma = gamma.unsqueeze(2)?.unsqueeze(3)?;
        let beta = beta.unsqueeze(2)?.unsqueeze(3)?;
        Ok(f.broadcast_mul(&(gamma + 1.0)?)?.broadcast_add(&beta)?)
    }
}

/// Per-level feature tensors produced by the encoder: both streams, the
/// cross-fused feature, and (teacher only) its text-modulated form.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub vis: Vec<Tensor>,
    pub ir: Vec<Tensor>,
    pub fused: Vec<Tensor>,
    pub modulated: Option<Vec<Tensor>>,
}

impl FeaturePyramid {
    /// The features the decoder consumes (modulated when text is enabled).
    pub fn decoder_features(&self) -> &[Tensor] {
        match &self.modulated {
            Some(m) => m,
            None => &self.fused,
        }
    }
}

#[derive(Debug, Clone)]
struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            conv: conv2d_no_bias(dim, dim * 2, 3, cfg, vb)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(x)?)
    }
}

#[derive(Debug, Clone)]
struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    /// Doubles resolution while halving channels: conv to 2x channels, then
    /// 2x pixel shuffle (which divides channels by 4).
    fn new(in_dim: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            conv: conv2d_no_bias(in_dim, in_dim * 2, 3, cfg, vb)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::pixel_shuffle(&self.conv.forward(x)?, 2)?)
    }
}

/// The full fusion network.
#[derive(Debug, Clone)]
pub struct FusionNet {
    cfg: NetConfig,
    patch_vis: Conv2d,
    patch_ir: Conv2d,
    enc_vis: Vec<Vec<EncoderBlock>>,
    enc_ir: Vec<Vec<EncoderBlock>>,
    down_vis: Vec<Downsample>,
    down_ir: Vec<Downsample>,
    scfm: Vec<Scfm>,
    text_mods: Option<Vec<TextMod>>,
    up: Vec<Upsample>,
    dec_fuse: Vec<Conv2d>,
    dec_blocks: Vec<Vec<EncoderBlock>>,
    refine: Vec<EncoderBlock>,
    out_conv: Conv2d,
}

impl FusionNet {
    pub fn new(cfg: &NetConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let conv3 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let patch_vis = conv2d(3, cfg.channels(0), 3, conv3, vb.pp("patch.vis"))?;
        let patch_ir = conv2d(1, cfg.channels(0), 3, conv3, vb.pp("patch.ir"))?;

        let mut enc_vis = Vec::new();
        let mut enc_ir = Vec::new();
        let mut scfm = Vec::new();
        let mut text_mods = if cfg.with_text { Some(Vec::new()) } else { None };
        let mut down_vis = Vec::new();
        let mut down_ir = Vec::new();
        for l in 0..LEVELS {
            let (c, h) = (cfg.channels(l), cfg.heads[l]);
            let mut bv = Vec::new();
            let mut bi = Vec::new();
            for k in 0..cfg.depths[l] {
                bv.push(EncoderBlock::new(
                    c,
                    h,
                    cfg.window,
                    vb.pp(format!("enc.vis.l{l}.b{k}")),
                )?);
                bi.push(EncoderBlock::new(
                    c,
                    h,
                    cfg.window,
                    vb.pp(format!("enc.ir.l{l}.b{k}")),
                )?);
            }
            enc_vis.push(bv);
            enc_ir.push(bi);
            scfm.push(Scfm::new(c, h, cfg.window, vb.pp(format!("scfm.l{l}")))?);
            if let Some(mods) = text_mods.as_mut() {
                mods.push(TextMod::new(cfg.text_dim, c, vb.pp(format!("text.l{l}")))?);
            }
            if l + 1 < LEVELS {
                down_vis.push(Downsample::new(c, vb.pp(format!("down.vis.l{l}")))?);
                down_ir.push(Downsample::new(c, vb.pp(format!("down.ir.l{l}")))?);
            }
        }

        let mut up = Vec::new();
        let mut dec_fuse = Vec::new();
        let mut dec_blocks = Vec::new();
        for l in 0..LEVELS - 1 {
            let c = cfg.channels(l);
            up.push(Upsample::new(c * 2, vb.pp(format!("up.l{l}")))?);
            dec_fuse.push(conv2d(
                c * 2,
                c,
                1,
                Conv2dConfig::default(),
                vb.pp(format!("dec.fuse.l{l}")),
            )?);
            let mut blocks = Vec::new();
            for k in 0..cfg.depths[l] {
                blocks.push(EncoderBlock::new(
                    c,
                    cfg.heads[l],
                    cfg.window,
                    vb.pp(format!("dec.l{l}.b{k}")),
                )?);
            }
            dec_blocks.push(blocks);
        }
        let mut refine = Vec::new();
        for k in 0..cfg.depths[0] {
            refine.push(EncoderBlock::new(
                cfg.channels(0),
                cfg.heads[0],
                cfg.window,
                vb.pp(format!("refine.b{k}")),
            )?);
        }
        let out_conv = conv2d(cfg.channels(0), 3, 3, conv3, vb.pp("out"))?;

        Ok(Self {
            cfg: cfg.clone(),
            patch_vis,
            patch_ir,
            enc_vis,
            enc_ir,
            down_vis,
            down_ir,
            scfm,
            text_mods,
            up,
            dec_fuse,
            dec_blocks,
            refine,
            out_conv,
        })
    }

    /// Builds a frozen network from checkpoint tensors, validating the name
    /// set and every shape against this config first.
    pub fn from_tensors(
        cfg: &NetConfig,
        tensors: &BTreeMap<String, Tensor>,
        prefix: &str,
        dev: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg, prefix);
        let expected: BTreeMap<&str, &[usize]> = specs
            .iter()
            .map(|(n, s)| (n.as_str(), s.as_slice()))
            .collect();
        for (name, shape) in &specs {
            match tensors.get(name) {
                None => return Err(Error::MissingTensor(name.clone())),
                Some(t) if t.dims() != shape.as_slice() => {
                    return Err(Error::TensorShape {
                        name: name.clone(),
                        expected: shape.clone(),
                        got: t.dims().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        let scope = format!("{prefix}.");
        for name in tensors.keys() {
            if name.starts_with(&scope) && !expected.contains_key(name.as_str()) {
                return Err(Error::UnknownTensor(name.clone()));
            }
        }
        let map: std::collections::HashMap<String, Tensor> = tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let vb = VarBuilder::from_tensors(map, DType::F32, dev);
        Self::new(cfg, vb.pp(prefix))
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Reflect-pads (right/bottom) to the padding multiple; returns the
    /// padded tensor and the original size.
    fn pad_input(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let (_, _, h, w) = x.dims4()?;
        let m = self.cfg.pad_multiple();
        let ph = (m - h % m) % m;
        let pw = (m - w % m) % m;
        let padded = if ph == 0 && pw == 0 {
            x.clone()
        } else {
            reflect_pad(x, 0, pw, 0, ph)?
        };
        Ok((padded, h, w))
    }

    /// Hierarchical dual-stream encoding; inputs must already be padded.
    pub fn encode(&self, vis: &Tensor, ir: &Tensor, text: Option<&Tensor>) -> Result<FeaturePyramid> {
        let mut fv = self.patch_vis.forward(vis)?;
        let mut fi = self.patch_ir.forward(ir)?;
        let mut pyr = FeaturePyramid {
            vis: Vec::with_capacity(LEVELS),
            ir: Vec::with_capacity(LEVELS),
            fused: Vec::with_capacity(LEVELS),
            modulated: self.text_mods.as_ref().map(|_| Vec::with_capacity(LEVELS)),
        };
        for l in 0..LEVELS {
            for block in &self.enc_vis[l] {
                fv = block.forward(&fv)?;
            }
            for block in &self.enc_ir[l] {
                fi = block.forward(&fi)?;
            }
            let fused = self.scfm[l].forward(&fv, &fi)?;
            if let (Some(mods), Some(out)) = (&self.text_mods, pyr.modulated.as_mut()) {
                let t = text.ok_or(Error::MissingText)?;
                out.push(mods[l].forward(&fused, t)?);
            }
            pyr.vis.push(fv.clone());
            pyr.ir.push(fi.clone());
            pyr.fused.push(fused);
            if l + 1 < LEVELS {
                fv = self.down_vis[l].forward(&fv)?;
                fi = self.down_ir[l].forward(&fi)?;
            }
        }
        Ok(pyr)
    }

    /// Decodes a pyramid back to an RGB image of the given original size.
    /// Output is unclamped; clamp at inference time only.
    pub fn decode(&self, pyr: &FeaturePyramid, orig_h: usize, orig_w: usize) -> Result<Tensor> {
        let feats = pyr.decoder_features();
        let mut dec = feats[LEVELS - 1].clone();
        for l in (0..LEVELS - 1).rev() {
            dec = self.up[l].forward(&dec)?;
            dec = self.dec_fuse[l].forward(&Tensor::cat(&[&dec, &feats[l]], 1)?)?;
            for block in &self.dec_blocks[l] {
                dec = block.forward(&dec)?;
            }
        }
        for block in &self.refine {
            dec = block.forward(&dec)?;
        }
        let out = self.out_conv.forward(&dec)?;
        Ok(out.narrow(2, 0, orig_h)?.narrow(3, 0, orig_w)?.contiguous()?)
    }

    /// Applies level-`l` text modulation; errors on a text-free config.
    pub fn modulate(&self, level: usize, f: &Tensor, t: &Tensor) -> Result<Tensor> {
        match &self.text_mods {
            None => Err(Error::TextDisabled),
            Some(mods) => mods[level].forward(f, t),
        }
    }

    /// Full forward pass: pad, encode, decode, unpad. `text` is (B, text_dim);
    /// a text-enabled config requires it, a text-free one ignores it.
    pub fn forward(
        &self,
        vis: &Tensor,
        ir: &Tensor,
        text: Option<&Tensor>,
    ) -> Result<(Tensor, FeaturePyramid)> {
        let (bv, cv, hv, wv) = vis.dims4()?;
        let (bi, ci, hi, wi) = ir.dims4()?;
        if cv != 3 {
            return Err(Error::ChannelMismatch {
                expected: "3 (RGB)",
                got: cv,
            });
        }
        if ci != 1 {
            return Err(Error::ChannelMismatch {
                expected: "1 (infrared)",
                got: ci,
            });
        }
        if bv != bi || (hv, wv) != (hi, wi) {
            return Err(Error::shape_mismatch(vis.dims(), ir.dims()));
        }
        if self.cfg.with_text {
            let t = text.ok_or(Error::MissingText)?;
            let dims = t.dims();
            if dims.len() != 2 || dims[0] != bv || dims[1] != self.cfg.text_dim {
                return Err(Error::shape_mismatch(
                    dims,
                    [bv, self.cfg.text_dim].as_slice(),
                ));
            }
        }
        let (vis_p, h, w) = self.pad_input(vis)?;
        let (ir_p, _, _) = self.pad_input(ir)?;
        let text = if self.cfg.with_text { text } else { None };
        let pyr = self.encode(&vis_p, &ir_p, text)?;
        let out = self.decode(&pyr, h, w)?;
        Ok((out, pyr))
    }
}

fn ssab_specs(prefix: &str, c: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.qkv.weight"), vec![3 * c, c]),
        (format!("{prefix}.proj.weight"), vec![c, c]),
        (format!("{prefix}.norm.weight"), vec![c]),
        (format!("{prefix}.norm.bias"), vec![c]),
    ]
}

fn tsab_specs(prefix: &str, c: usize, heads: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.qkv.weight"), vec![3 * c, c, 1, 1]),
        (format!("{prefix}.proj.weight"), vec![c, c, 1, 1]),
        (format!("{prefix}.temperature"), vec![heads, 1, 1]),
        (format!("{prefix}.norm.weight"), vec![c]),
        (format!("{prefix}.norm.bias"), vec![c]),
    ]
}

fn block_specs(prefix: &str, c: usize, heads: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = ssab_specs(&format!("{prefix}.ssab"), c);
    out.extend(tsab_specs(&format!("{prefix}.tsab"), c, heads));
    out
}

/// Every learnable tensor of the network for `cfg`, as (name, shape), with
/// names rooted at `prefix`. This is the ground truth for checkpoint
/// validation and parameter counting.
pub fn param_specs(cfg: &NetConfig, prefix: &str) -> Vec<(String, Vec<usize>)> {
    let p = |s: String| {
        if prefix.is_empty() {
            s
        } else {
            format!("{prefix}.{s}")
        }
    };
    let c0 = cfg.channels(0);
    let mut specs = vec![
        (p("patch.vis.weight".into()), vec![c0, 3, 3, 3]),
        (p("patch.vis.bias".into()), vec![c0]),
        (p("patch.ir.weight".into()), vec![c0, 1, 3, 3]),
        (p("patch.ir.bias".into()), vec![c0]),
    ];
    for l in 0..LEVELS {
        let (c, h) = (cfg.channels(l), cfg.heads[l]);
        for stream in ["vis", "ir"] {
            for k in 0..cfg.depths[l] {
                specs.extend(
                    block_specs(&format!("enc.{stream}.l{l}.b{k}"), c, h)
                        .into_iter()
                        .map(|(n, s)| (p(n), s)),
                );
            }
        }
        for part in [
            ssab_specs(&format!("scfm.l{l}.vis_ssab"), c),
            tsab_specs(&format!("scfm.l{l}.ir_tsab"), c, h),
            ssab_specs(&format!("scfm.l{l}.ir_ssab"), c),
            tsab_specs(&format!("scfm.l{l}.vis_tsab"), c, h),
        ] {
            specs.extend(part.into_iter().map(|(n, s)| (p(n), s)));
        }
        for side in ["vis", "ir"] {
            specs.push((p(format!("scfm.l{l}.cat_{side}.weight")), vec![c, 2 * c, 1, 1]));
            specs.push((p(format!("scfm.l{l}.cat_{side}.bias")), vec![c]));
        }
        if cfg.with_text {
            for (mlp, in_dim) in [
                ("gamma1", cfg.text_dim),
                ("gamma2", c),
                ("beta1", cfg.text_dim),
                ("beta2", c),
            ] {
                specs.push((p(format!("text.l{l}.{mlp}.weight")), vec![c, in_dim]));
                specs.push((p(format!("text.l{l}.{mlp}.bias")), vec![c]));
            }
        }
        if l + 1 < LEVELS {
            for stream in ["vis", "ir"] {
                specs.push((
                    p(format!("down.{stream}.l{l}.weight")),
                    vec![2 * c, c, 3, 3],
                ));
            }
        }
    }
    for l in 0..LEVELS - 1 {
        let c = cfg.channels(l);
        specs.push((p(format!("up.l{l}.weight")), vec![4 * c, 2 * c, 3, 3]));
        specs.push((p(format!("dec.fuse.l{l}.weight")), vec![c, 2 * c, 1, 1]));
        specs.push((p(format!("dec.fuse.l{l}.bias")), vec![c]));
        for k in 0..cfg.depths[l] {
            specs.extend(
                block_specs(&format!("dec.l{l}.b{k}"), c, cfg.heads[l])
                    .into_iter()
                    .map(|(n, s)| (p(n), s)),
            );
        }
    }
    for k in 0..cfg.depths[0] {
        specs.extend(
            block_specs(&format!("refine.b{k}"), c0, cfg.heads[0])
                .into_iter()
                .map(|(n, s)| (p(n), s)),
        );
    }
    specs.push((p("out.weight".into()), vec![3, c0, 3, 3]));
    specs.push((p("out.bias".into()), vec![3]));
    specs
}

/// Exact count of learnable scalars for a config.
pub fn count_params(cfg: &NetConfig) -> usize {
    param_specs(cfg, "")
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum()
}

/// Deterministically re-initializes every variable in the map. Each tensor
/// gets its own ChaCha12 stream keyed by SHA-256 of its name and the global
/// seed, so results do not depend on platform or creation order. Rules:
/// norm weights and temperatures start at 1, biases and the text-modulation
/// output layers at 0, everything else Kaiming-uniform by fan-in.
pub fn deterministic_init(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let shape = var.dims().to_vec();
        let n: usize = shape.iter().product();
        let dev = var.device().clone();
        let values: Vec<f64> = if name.ends_with(".temperature") || name.ends_with(".norm.weight")
        {
            vec![1.0; n]
        } else if name.ends_with("out.bias") {
            // Start the output head at mid-gray so the initial prediction sits
            // near the intensity targets instead of deep below them.
            vec![0.5; n]
        } else if name.ends_with(".bias") && !is_zero_mlp(name) {
            vec![0.0; n]
        } else if is_zero_mlp(name) {
            vec![0.0; n]
        } else {
            let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let digest = Sha256::digest(name.as_bytes());
            let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ key);
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let t = Tensor::from_vec(values, shape, &dev)?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

fn is_zero_mlp(name: &str) -> bool {
    ["gamma2", "beta2"]
        .iter()
        .any(|m| name.contains(&format!(".{m}.")))
}
