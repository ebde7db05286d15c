//! A small encoder-decoder segmentation network with an auxiliary view
//! classification head, written out explicitly: forward, reverse-mode
//! gradients, SGD with momentum and per-layer-group learning rates, and a
//! bit-exact checkpoint format.
//!
//! Everything runs in `f64` with fixed iteration orders and a seeded
//! generator, so identical (seed, data, config) produce bit-identical
//! parameters and checkpoints on every platform.
//!
//! Architecture: per level two 3x3 convolutions with ReLU; 2x max-pool
//! down; nearest-neighbor upsampling plus a 3x3 convolution up, with skip
//! concatenation; a 1x1 head with per-pixel softmax for segmentation; and
//! a global-average-pooled bottleneck feeding a linear view head.

use std::fs;
use std::io::Write as IoWrite;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::annio::ProbabilityMap;
use crate::imgproc::GrayImage;
use crate::lossmetric::{combo_loss, cross_entropy, ComboLossConfig, PixelTargets, ProbVolume};
use crate::seeds::rng_from_seed;

/// SGD momentum coefficient.
pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("invalid network configuration: {0}")]
    BadConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("non-finite loss {loss} at step {step}; parameters left untouched")]
    NanLoss { step: u64, loss: f64 },
    #[error("model already has a multiclass output head")]
    AlreadyMultilabel,
    #[error("bad checkpoint magic {found:?} (expected \"ARTCKPT1\")")]
    CkptMagic { found: String },
    #[error("unsupported checkpoint version {0}")]
    CkptVersion(u32),
    #[error("corrupt checkpoint: expected {expected} bytes, got {actual}")]
    CkptCorrupt { expected: u64, actual: u64 },
    #[error("checkpoint does not match the expected configuration: {0}")]
    CkptConfigMismatch(String),
    #[error(transparent)]
    Loss(#[from] crate::lossmetric::LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnetError>;

/// Network shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    /// Number of 2x downsamplings (>= 1).
    pub depth: usize,
    /// 2 for the binary stage, 27 for multivessel.
    pub out_classes: usize,
    pub view_classes: usize,
    pub seed: u64,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(NnetError::BadConfig("depth must be >= 1".into()));
        }
        let div = 1 << self.depth;
        if self.height % div != 0 || self.width % div != 0 {
            return Err(NnetError::BadConfig(format!(
                "{}x{} not divisible by 2^{}",
                self.height, self.width, self.depth
            )));
        }
        if self.out_classes != 2 && self.out_classes != 27 {
            return Err(NnetError::BadConfig(format!(
                "out_classes must be 2 or 27, got {}",
                self.out_classes
            )));
        }
        if self.base_channels == 0 || self.view_classes == 0 {
            return Err(NnetError::BadConfig(
                "base_channels and view_classes must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Channels at pyramid level `i`.
    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Number of learning-rate groups: encoder blocks, decoder blocks,
    /// segmentation head, view head.
    pub fn group_count(&self) -> usize {
        2 * self.depth + 3
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    fn he_init(in_ch: usize, out_ch: usize, ksize: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_ch * ksize * ksize) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = (0..out_ch * in_ch * ksize * ksize)
            .map(|_| normal_draw(rng) * std)
            .collect();
        Self {
            in_ch,
            out_ch,
            ksize,
            weight,
            bias: vec![0.0; out_ch],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            ksize: self.ksize,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = self.ksize;
        let half = (k / 2) as i64;
        let plane = h * w;
        let mut out = vec![0.0; self.out_ch * plane];
        for oc in 0..self.out_ch {
            let ob = oc * plane;
            out[ob..ob + plane].fill(self.bias[oc]);
            for ic in 0..self.in_ch {
                let ib = ic * plane;
                let wb = (oc * self.in_ch + ic) * k * k;
                for ky in 0..k {
                    let dy = ky as i64 - half;
                    for kx in 0..k {
                        let dx = kx as i64 - half;
                        let wgt = self.weight[wb + ky * k + kx];
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (h as i64).min(h as i64 - dy) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as i64).min(w as i64 - dx) as usize;
                        for y in y0..y1 {
                            let irow = ib + (y as i64 + dy) as usize * w;
                            let orow = ob + y * w;
                            for x in x0..x1 {
                                out[orow + x] += wgt * input[irow + (x as i64 + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns (grad_input, grad_weight, grad_bias).
    fn backward(
        &self,
        input: &[f64],
        grad_out: &[f64],
        h: usize,
        w: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let k = self.ksize;
        let half = (k / 2) as i64;
        let plane = h * w;
        let mut grad_in = vec![0.0; self.in_ch * plane];
        let mut grad_w = vec![0.0; self.weight.len()];
        let mut grad_b = vec![0.0; self.out_ch];
        for oc in 0..self.out_ch {
            let ob = oc * plane;
            grad_b[oc] = grad_out[ob..ob + plane].iter().sum();
            for ic in 0..self.in_ch {
                let ib = ic * plane;
                let wb = (oc * self.in_ch + ic) * k * k;
                for ky in 0..k {
                    let dy = ky as i64 - half;
                    for kx in 0..k {
                        let dx = kx as i64 - half;
                        let wgt = self.weight[wb + ky * k + kx];
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (h as i64).min(h as i64 - dy) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as i64).min(w as i64 - dx) as usize;
                        let mut wsum = 0.0;
                        for y in y0..y1 {
                            let irow = ib + (y as i64 + dy) as usize * w;
                            let orow = ob + y * w;
                            for x in x0..x1 {
                                let g = grad_out[orow + x];
                                let ii = irow + (x as i64 + dx) as usize;
                                wsum += g * input[ii];
                                grad_in[ii] += wgt * g;
                            }
                        }
                        grad_w[wb + ky * k + kx] += wsum;
                    }
                }
            }
        }
        (grad_in, grad_w, grad_b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out][in]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn he_init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: (0..out_dim * in_dim).map(|_| normal_draw(rng) * std).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn forward(&self, input: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                self.bias[o]
                    + self.weight[o * self.in_dim..(o + 1) * self.in_dim]
                        .iter()
                        .zip(input)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
            })
            .collect()
    }

    fn backward(&self, input: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut grad_in = vec![0.0; self.in_dim];
        let mut grad_w = vec![0.0; self.weight.len()];
        for o in 0..self.out_dim {
            let g = grad_out[o];
            for i in 0..self.in_dim {
                grad_w[o * self.in_dim + i] = g * input[i];
                grad_in[i] += g * self.weight[o * self.in_dim + i];
            }
        }
        (grad_in, grad_w, grad_out.to_vec())
    }
}

/// Two 3x3 convolutions, each followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

/// Decoder step: nearest-neighbor 2x upsample, 3x3 conv + ReLU, skip
/// concatenation, then a [`ConvBlock`].
#[derive(Debug, Clone, PartialEq)]
pub struct UpBlock {
    pub up_conv: Conv2d,
    pub block: ConvBlock,
}

/// All learnable layers (also reused as the gradient and momentum
/// containers, with zeroed data).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub encoders: Vec<ConvBlock>,
    pub decoders: Vec<UpBlock>,
    pub seg_head: Conv2d,
    pub view_head: Linear,
}

impl LayerStack {
    fn zeros_like(&self) -> Self {
        Self {
            encoders: self
                .encoders
                .iter()
                .map(|b| ConvBlock {
                    conv1: b.conv1.zeros_like(),
                    conv2: b.conv2.zeros_like(),
                })
                .collect(),
            decoders: self
                .decoders
                .iter()
                .map(|d| UpBlock {
                    up_conv: d.up_conv.zeros_like(),
                    block: ConvBlock {
                        conv1: d.block.conv1.zeros_like(),
                        conv2: d.block.conv2.zeros_like(),
                    },
                })
                .collect(),
            seg_head: self.seg_head.zeros_like(),
            view_head: self.view_head.zeros_like(),
        }
    }

    /// All tensors in group order: encoder blocks (shallow to deep),
    /// decoder blocks (deep to shallow), segmentation head, view head.
    pub fn tensors(&self) -> Vec<(usize, &Vec<f64>)> {
        let mut out = Vec::new();
        for (i, b) in self.encoders.iter().enumerate() {
            out.push((i, &b.conv1.weight));
            out.push((i, &b.conv1.bias));
            out.push((i, &b.conv2.weight));
            out.push((i, &b.conv2.bias));
        }
        let enc_groups = self.encoders.len();
        for (s, d) in self.decoders.iter().enumerate() {
            let g = enc_groups + s;
            out.push((g, &d.up_conv.weight));
            out.push((g, &d.up_conv.bias));
            out.push((g, &d.block.conv1.weight));
            out.push((g, &d.block.conv1.bias));
            out.push((g, &d.block.conv2.weight));
            out.push((g, &d.block.conv2.bias));
        }
        let g = enc_groups + self.decoders.len();
        out.push((g, &self.seg_head.weight));
        out.push((g, &self.seg_head.bias));
        out.push((g + 1, &self.view_head.weight));
        out.push((g + 1, &self.view_head.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(usize, &mut Vec<f64>)> {
        let enc_groups = self.encoders.len();
        let dec_groups = self.decoders.len();
        let mut out = Vec::new();
        for (i, b) in self.encoders.iter_mut().enumerate() {
            out.push((i, &mut b.conv1.weight));
            out.push((i, &mut b.conv1.bias));
            out.push((i, &mut b.conv2.weight));
            out.push((i, &mut b.conv2.bias));
        }
        for (s, d) in self.decoders.iter_mut().enumerate() {
            let g = enc_groups + s;
            out.push((g, &mut d.up_conv.weight));
            out.push((g, &mut d.up_conv.bias));
            out.push((g, &mut d.block.conv1.weight));
            out.push((g, &mut d.block.conv1.bias));
            out.push((g, &mut d.block.conv2.weight));
            out.push((g, &mut d.block.conv2.bias));
        }
        let g = enc_groups + dec_groups;
        out.push((g, &mut self.seg_head.weight));
        out.push((g, &mut self.seg_head.bias));
        out.push((g + 1, &mut self.view_head.weight));
        out.push((g + 1, &mut self.view_head.bias));
        out
    }

    fn add_assign(&mut self, other: &LayerStack) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Full model: configuration echo, stage provenance, step counter,
/// parameters, and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: NetConfig,
    /// Last completed training stage (0 = freshly initialized).
    pub completed_stage: u32,
    pub step: u64,
    pub layers: LayerStack,
    pub momentum: LayerStack,
}

/// Box-Muller standard normal from two uniform draws. Hand-rolled so the
/// parameter stream never depends on external distribution tables.
fn normal_draw(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Build a freshly He-initialized model from a seed; deterministic.
pub fn init_model(cfg: &NetConfig) -> Result<ModelState> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut encoders = Vec::with_capacity(cfg.depth + 1);
    for level in 0..=cfg.depth {
        let c_in = if level == 0 { 1 } else { cfg.channels(level - 1) };
        let c = cfg.channels(level);
        encoders.push(ConvBlock {
            conv1: Conv2d::he_init(c_in, c, 3, &mut rng),
            conv2: Conv2d::he_init(c, c, 3, &mut rng),
        });
    }
    let mut decoders = Vec::with_capacity(cfg.depth);
    for s in 0..cfg.depth {
        let level = cfg.depth - 1 - s;
        let c_hi = cfg.channels(level + 1);
        let c = cfg.channels(level);
        decoders.push(UpBlock {
            up_conv: Conv2d::he_init(c_hi, c, 3, &mut rng),
            block: ConvBlock {
                conv1: Conv2d::he_init(2 * c, c, 3, &mut rng),
                conv2: Conv2d::he_init(c, c, 3, &mut rng),
            },
        });
    }
    let seg_head = Conv2d::he_init(cfg.base_channels, cfg.out_classes, 1, &mut rng);
    let view_head = Linear::he_init(cfg.channels(cfg.depth), cfg.view_classes, &mut rng);
    let layers = LayerStack {
        encoders,
        decoders,
        seg_head,
        view_head,
    };
    let momentum = layers.zeros_like();
    Ok(ModelState {
        config: *cfg,
        completed_stage: 0,
        step: 0,
        layers,
        momentum,
    })
}

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

fn relu_backward(pre: &[f64], grad_out: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(grad_out)
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect()
}

/// 2x2 max-pool, stride 2; ties keep the first maximum in scan order.
fn maxpool_forward(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut idx = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (ch * h + oy * 2 + dy) * w + ox * 2 + dx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = best;
                idx[o] = best_i;
            }
        }
    }
    (out, idx)
}

fn maxpool_backward(grad_out: &[f64], idx: &[usize], input_len: usize) -> Vec<f64> {
    let mut grad_in = vec![0.0; input_len];
    for (o, &i) in idx.iter().enumerate() {
        grad_in[i] += grad_out[o];
    }
    grad_in
}

/// Nearest-neighbor 2x upsample.
fn upsample_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src_row = (ch * h + y / 2) * w;
            let dst_row = (ch * oh + y) * ow;
            for x_o in 0..ow {
                out[dst_row + x_o] = x[src_row + x_o / 2];
            }
        }
    }
    out
}

fn upsample_backward(grad_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    // h, w are the *input* (coarse) dims.
    let (oh, ow) = (h * 2, w * 2);
    let mut grad_in = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            let src_row = (ch * h + y / 2) * w;
            let dst_row = (ch * oh + y) * ow;
            for x_o in 0..ow {
                grad_in[src_row + x_o / 2] += grad_out[dst_row + x_o];
            }
        }
    }
    grad_in
}

fn softmax_channels(logits: &[f64], c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for pix in 0..plane {
        let mut max_v = f64::NEG_INFINITY;
        for ch in 0..c {
            max_v = max_v.max(logits[ch * plane + pix]);
        }
        let mut sum = 0.0;
        for ch in 0..c {
            let e = (logits[ch * plane + pix] - max_v).exp();
            out[ch * plane + pix] = e;
            sum += e;
        }
        for ch in 0..c {
            out[ch * plane + pix] /= sum;
        }
    }
    out
}

/// dL/dz from dL/dp for a per-pixel softmax.
fn softmax_backward(probs: &[f64], grad_probs: &[f64], c: usize, plane: usize) -> Vec<f64> {
    let mut grad_z = vec![0.0; probs.len()];
    for pix in 0..plane {
        let mut dot = 0.0;
        for ch in 0..c {
            let i = ch * plane + pix;
            dot += grad_probs[i] * probs[i];
        }
        for ch in 0..c {
            let i = ch * plane + pix;
            grad_z[i] = probs[i] * (grad_probs[i] - dot);
        }
    }
    grad_z
}

// ---------------------------------------------------------------------------
// Forward pass with trace
// ---------------------------------------------------------------------------

struct BlockTrace {
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    out: Vec<f64>,
}

fn block_forward(block: &ConvBlock, input: Vec<f64>, h: usize, w: usize) -> BlockTrace {
    let pre1 = block.conv1.forward(&input, h, w);
    let act1 = relu(&pre1);
    let pre2 = block.conv2.forward(&act1, h, w);
    let out = relu(&pre2);
    BlockTrace {
        input,
        pre1,
        act1,
        pre2,
        out,
    }
}

/// Returns (grad_input, conv1 grads, conv2 grads).
#[allow(clippy::type_complexity)]
fn block_backward(
    block: &ConvBlock,
    trace: &BlockTrace,
    grad_out: &[f64],
    h: usize,
    w: usize,
) -> (Vec<f64>, (Vec<f64>, Vec<f64>), (Vec<f64>, Vec<f64>)) {
    let g2 = relu_backward(&trace.pre2, grad_out);
    let (g_act1, gw2, gb2) = block.conv2.backward(&trace.act1, &g2, h, w);
    let g1 = relu_backward(&trace.pre1, &g_act1);
    let (g_in, gw1, gb1) = block.conv1.backward(&trace.input, &g1, h, w);
    (g_in, (gw1, gb1), (gw2, gb2))
}

struct UpTrace {
    upsampled: Vec<f64>,
    pre: Vec<f64>,
    block: BlockTrace,
}

struct ForwardTrace {
    enc: Vec<BlockTrace>,
    pool_idx: Vec<Vec<usize>>,
    dec: Vec<UpTrace>,
    seg_probs: ProbVolume,
    gap: Vec<f64>,
    view_probs: Vec<f64>,
}

fn run_forward(model: &ModelState, img: &GrayImage) -> Result<ForwardTrace> {
    let cfg = &model.config;
    if img.width != cfg.width || img.height != cfg.height {
        return Err(NnetError::DimensionMismatch {
            expected: format!("{}x{}", cfg.width, cfg.height),
            got: format!("{}x{}", img.width, img.height),
        });
    }
    let input: Vec<f64> = img.data.iter().map(|&v| v as f64 / 255.0).collect();

    let mut enc = Vec::with_capacity(cfg.depth + 1);
    let mut pool_idx = Vec::with_capacity(cfg.depth);
    let mut current = input;
    for level in 0..=cfg.depth {
        let (h, w) = (cfg.height >> level, cfg.width >> level);
        let trace = block_forward(&model.layers.encoders[level], current, h, w);
        if level < cfg.depth {
            let (pooled, idx) = maxpool_forward(&trace.out, cfg.channels(level), h, w);
            pool_idx.push(idx);
            current = pooled;
        } else {
            current = trace.out.clone();
        }
        enc.push(trace);
    }

    // `current` is the bottleneck output.
    let mut dec = Vec::with_capacity(cfg.depth);
    for s in 0..cfg.depth {
        let level = cfg.depth - 1 - s;
        let (h, w) = (cfg.height >> level, cfg.width >> level);
        let c_hi = cfg.channels(level + 1);
        let c = cfg.channels(level);
        let upsampled = upsample_forward(&current, c_hi, h / 2, w / 2);
        let up = &model.layers.decoders[s];
        let pre = up.up_conv.forward(&upsampled, h, w);
        let act = relu(&pre);
        let mut cat = Vec::with_capacity(2 * c * h * w);
        cat.extend_from_slice(&enc[level].out);
        cat.extend_from_slice(&act);
        let block = block_forward(&up.block, cat, h, w);
        current = block.out.clone();
        dec.push(UpTrace {
            upsampled,
            pre,
            block,
        });
    }

    let plane = cfg.height * cfg.width;
    let seg_logits = model.layers.seg_head.forward(&current, cfg.height, cfg.width);
    let seg_probs = ProbVolume::from_data(
        cfg.out_classes,
        cfg.height,
        cfg.width,
        softmax_channels(&seg_logits, cfg.out_classes, plane),
    );

    let bottleneck = &enc[cfg.depth].out;
    let c_b = cfg.channels(cfg.depth);
    let b_plane = (cfg.height >> cfg.depth) * (cfg.width >> cfg.depth);
    let gap: Vec<f64> = (0..c_b)
        .map(|ch| bottleneck[ch * b_plane..(ch + 1) * b_plane].iter().sum::<f64>() / b_plane as f64)
        .collect();
    let view_logits = model.layers.view_head.forward(&gap);
    let view_probs = softmax_channels(&view_logits, cfg.view_classes, 1);

    Ok(ForwardTrace {
        enc,
        pool_idx,
        dec,
        seg_probs,
        gap,
        view_probs,
    })
}

/// Forward pass in training precision: per-pixel class probabilities and
/// the view distribution, both `f64`.
pub fn forward_volume(model: &ModelState, img: &GrayImage) -> Result<(ProbVolume, Vec<f64>)> {
    let trace = run_forward(model, img)?;
    Ok((trace.seg_probs, trace.view_probs))
}

/// Inference entry point: quantizes the probabilities to the `f32`
/// interchange format.
pub fn forward(model: &ModelState, img: &GrayImage) -> Result<(ProbabilityMap, Vec<f64>)> {
    let (probs, view) = forward_volume(model, img)?;
    Ok((probs.to_probability_map(), view))
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Backpropagate per-sample probability-space gradients into parameter
/// gradients. `grad_seg` is dL/d(seg probs); `grad_view` is dL/d(view
/// probs) or empty when the view loss is off.
fn run_backward(
    model: &ModelState,
    trace: &ForwardTrace,
    grad_seg: &[f64],
    grad_view: &[f64],
) -> LayerStack {
    let cfg = &model.config;
    let mut grads = model.layers.zeros_like();
    let plane = cfg.height * cfg.width;

    // Segmentation head.
    let gz_seg = softmax_backward(&trace.seg_probs.data, grad_seg, cfg.out_classes, plane);
    let dec_final = if cfg.depth == 0 {
        &trace.enc[0].out
    } else {
        &trace.dec[cfg.depth - 1].block.out
    };
    let (mut grad_current, gw_head, gb_head) =
        model
            .layers
            .seg_head
            .backward(dec_final, &gz_seg, cfg.height, cfg.width);
    grads.seg_head.weight = gw_head;
    grads.seg_head.bias = gb_head;

    // Per-level gradients flowing into encoder outputs (skips + pools).
    let mut grad_enc_out: Vec<Vec<f64>> = (0..=cfg.depth)
        .map(|level| {
            vec![0.0; cfg.channels(level) * (cfg.height >> level) * (cfg.width >> level)]
        })
        .collect();

    // View head path: linear -> GAP -> bottleneck output.
    if !grad_view.is_empty() {
        let gz_view = softmax_backward(&trace.view_probs, grad_view, cfg.view_classes, 1);
        let (grad_gap, gw_view, gb_view) = model.layers.view_head.backward(&trace.gap, &gz_view);
        grads.view_head.weight = gw_view;
        grads.view_head.bias = gb_view;
        let c_b = cfg.channels(cfg.depth);
        let b_plane = (cfg.height >> cfg.depth) * (cfg.width >> cfg.depth);
        for ch in 0..c_b {
            let g = grad_gap[ch] / b_plane as f64;
            for v in &mut grad_enc_out[cfg.depth][ch * b_plane..(ch + 1) * b_plane] {
                *v += g;
            }
        }
    }

    // Decoder chain, in reverse of execution order.
    for s in (0..cfg.depth).rev() {
        let level = cfg.depth - 1 - s;
        let (h, w) = (cfg.height >> level, cfg.width >> level);
        let c = cfg.channels(level);
        let c_hi = cfg.channels(level + 1);
        let up = &model.layers.decoders[s];
        let tr = &trace.dec[s];

        let (grad_cat, (gw1, gb1), (gw2, gb2)) =
            block_backward(&up.block, &tr.block, &grad_current, h, w);
        grads.decoders[s].block.conv1.weight = gw1;
        grads.decoders[s].block.conv1.bias = gb1;
        grads.decoders[s].block.conv2.weight = gw2;
        grads.decoders[s].block.conv2.bias = gb2;

        let skip_len = c * h * w;
        for (dst, src) in grad_enc_out[level].iter_mut().zip(&grad_cat[..skip_len]) {
            *dst += src;
        }
        let grad_act = &grad_cat[skip_len..];
        let g_pre = relu_backward(&tr.pre, grad_act);
        let (grad_upsampled, gw_up, gb_up) = up.up_conv.backward(&tr.upsampled, &g_pre, h, w);
        grads.decoders[s].up_conv.weight = gw_up;
        grads.decoders[s].up_conv.bias = gb_up;

        let grad_prev = upsample_backward(&grad_upsampled, c_hi, h / 2, w / 2);
        if s == 0 {
            for (dst, src) in grad_enc_out[cfg.depth].iter_mut().zip(&grad_prev) {
                *dst += src;
            }
        } else {
            grad_current = grad_prev;
        }
    }

    // Encoder chain, deepest level first.
    let mut carry: Option<Vec<f64>> = None;
    for level in (0..=cfg.depth).rev() {
        let (h, w) = (cfg.height >> level, cfg.width >> level);
        let mut grad_out = std::mem::take(&mut grad_enc_out[level]);
        if let Some(extra) = carry.take() {
            for (dst, src) in grad_out.iter_mut().zip(&extra) {
                *dst += src;
            }
        }
        let (grad_in, (gw1, gb1), (gw2, gb2)) = block_backward(
            &model.layers.encoders[level],
            &trace.enc[level],
            &grad_out,
            h,
            w,
        );
        grads.encoders[level].conv1.weight = gw1;
        grads.encoders[level].conv1.bias = gb1;
        grads.encoders[level].conv2.weight = gw2;
        grads.encoders[level].conv2.bias = gb2;
        if level > 0 {
            // grad_in is the gradient at this level's pooled input,
            // which came from the previous level's output.
            let below = cfg.channels(level - 1) * (cfg.height >> (level - 1)) * (cfg.width >> (level - 1));
            carry = Some(maxpool_backward(&grad_in, &trace.pool_idx[level - 1], below));
        }
    }
    grads
}

// ---------------------------------------------------------------------------
// Learning rates and training
// ---------------------------------------------------------------------------

/// Per-group learning rates as `base_lr * multipliers[group]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub multipliers: Vec<f64>,
}

impl LrSchedule {
    /// Same rate for every group.
    pub fn uniform(base_lr: f64, groups: usize) -> Self {
        Self {
            base_lr,
            multipliers: vec![1.0; groups],
        }
    }

    /// Zero everywhere except the two head groups, which train at base.
    pub fn head_only(base_lr: f64, groups: usize) -> Self {
        let mut multipliers = vec![0.0; groups];
        for m in multipliers.iter_mut().rev().take(2) {
            *m = 1.0;
        }
        Self {
            base_lr,
            multipliers,
        }
    }

    /// Fine-tuning rates: geometric progression from `base/400` on the
    /// earliest group to `base/4` on the latest; a single group uses
    /// `base/4`.
    pub fn discriminative(base_lr: f64, groups: usize) -> Self {
        Self {
            base_lr,
            multipliers: discriminative_lrs(1.0, groups),
        }
    }

    pub fn rate(&self, group: usize) -> f64 {
        self.base_lr * self.multipliers[group]
    }
}

/// Geometric learning-rate ladder from `base/400` to `base/4`.
pub fn discriminative_lrs(base: f64, groups: usize) -> Vec<f64> {
    assert!(groups >= 1);
    if groups == 1 {
        return vec![base / 4.0];
    }
    let lo = base / 400.0;
    let ratio = 100f64.powf(1.0 / (groups - 1) as f64);
    (0..groups).map(|g| lo * ratio.powi(g as i32)).collect()
}

/// One training sample: image, pixel targets, optional view label.
pub struct TrainSample<'a> {
    pub image: &'a GrayImage,
    pub targets: &'a PixelTargets,
    pub view_label: Option<usize>,
}

/// One SGD-with-momentum step on a mini-batch.
///
/// The total loss is `combo(seg) + lambda_view * CE(view)` averaged over
/// the batch (the view term only where a label is present). Gradients are
/// reduced in batch order, so the update is deterministic. A non-finite
/// loss aborts the step without touching parameters. Returns the
/// pre-update loss.
pub fn train_step(
    model: &mut ModelState,
    batch: &[TrainSample<'_>],
    loss_cfg: &ComboLossConfig,
    schedule: &LrSchedule,
    lambda_view: f64,
) -> Result<f64> {
    assert!(!batch.is_empty(), "batch must be non-empty");
    assert_eq!(
        schedule.multipliers.len(),
        model.config.group_count(),
        "schedule group count mismatch"
    );

    let results: Vec<Result<(f64, LayerStack)>> = batch
        .par_iter()
        .map(|sample| {
            let trace = run_forward(model, sample.image)?;
            let (seg_loss, grad_seg) = combo_loss(&trace.seg_probs, sample.targets, loss_cfg)?;
            let mut total = seg_loss;
            let grad_view = match sample.view_label {
                Some(label) if lambda_view != 0.0 => {
                    let (ce, mut gv) = cross_entropy(&trace.view_probs, label)?;
                    total += lambda_view * ce;
                    for g in gv.iter_mut() {
                        *g *= lambda_view;
                    }
                    gv
                }
                _ => Vec::new(),
            };
            let grads = run_backward(model, &trace, &grad_seg, &grad_view);
            Ok((total, grads))
        })
        .collect();

    let mut batch_loss = 0.0;
    let mut total_grads: Option<LayerStack> = None;
    for result in results {
        let (loss, grads) = result?;
        batch_loss += loss;
        match &mut total_grads {
            None => total_grads = Some(grads),
            Some(acc) => acc.add_assign(&grads),
        }
    }
    let scale = 1.0 / batch.len() as f64;
    batch_loss *= scale;
    if !batch_loss.is_finite() {
        return Err(NnetError::NanLoss {
            step: model.step,
            loss: batch_loss,
        });
    }
    let mut grads = total_grads.expect("non-empty batch");
    grads.scale(scale);

    // v <- mu v + g ; p <- p - lr_group v
    for (((group, param), (_, grad)), (_, vel)) in model
        .layers
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(model.momentum.tensors_mut())
    {
        let lr = schedule.rate(group);
        for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
            *v = MOMENTUM * *v + g;
            *p -= lr * *v;
        }
    }
    model.step += 1;
    Ok(batch_loss)
}

/// Re-head a binary model for multivessel output: every non-head
/// parameter (and its momentum) is copied bit-exactly; the new 1x1 head
/// is seeded fresh with zero momentum.
pub fn adapt_output_head(model: &ModelState, new_classes: usize, seed: u64) -> Result<ModelState> {
    if model.config.out_classes != 2 {
        return Err(NnetError::AlreadyMultilabel);
    }
    let mut config = model.config;
    config.out_classes = new_classes;
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let seg_head = Conv2d::he_init(config.base_channels, new_classes, 1, &mut rng);
    let mut out = ModelState {
        config,
        completed_stage: model.completed_stage,
        step: model.step,
        layers: LayerStack {
            seg_head: seg_head.clone(),
            ..model.layers.clone()
        },
        momentum: LayerStack {
            seg_head: seg_head.zeros_like(),
            ..model.momentum.clone()
        },
    };
    out.momentum.seg_head = out.layers.seg_head.zeros_like();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: "ARTCKPT1", version, config, then f64 LE tensors in
// group order (parameter data immediately followed by its momentum).
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"ARTCKPT1";
const CKPT_VERSION: u32 = 1;

fn expected_payload_bytes(layers: &LayerStack) -> u64 {
    2 * 8 * layers.param_count() as u64
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    for (_, t) in model.layers.tensors() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(NnetError::BadConfig(
                "refusing to checkpoint non-finite parameters".into(),
            ));
        }
    }
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for v in [
        cfg.height as u32,
        cfg.width as u32,
        cfg.base_channels as u32,
        cfg.depth as u32,
        cfg.out_classes as u32,
        cfg.view_classes as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&model.completed_stage.to_le_bytes());
    out.extend_from_slice(&model.step.to_le_bytes());
    for ((_, param), (_, vel)) in model.layers.tensors().into_iter().zip(model.momentum.tensors()) {
        for v in param {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in vel {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..8] != CKPT_MAGIC {
        return Err(NnetError::CkptMagic {
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
        });
    }
    let header_len = 8 + 4 + 6 * 4 + 8 + 4 + 8;
    if bytes.len() < header_len {
        return Err(NnetError::CkptCorrupt {
            expected: header_len as u64,
            actual: bytes.len() as u64,
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let u64_at = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != CKPT_VERSION {
        return Err(NnetError::CkptVersion(version));
    }
    let config = NetConfig {
        height: u32_at(12) as usize,
        width: u32_at(16) as usize,
        base_channels: u32_at(20) as usize,
        depth: u32_at(24) as usize,
        out_classes: u32_at(28) as usize,
        view_classes: u32_at(32) as usize,
        seed: u64_at(36),
    };
    let completed_stage = u32_at(44);
    let step = u64_at(48);

    // Rebuild the layer skeleton from the config, then validate sizes.
    let mut model = init_model(&config)?;
    model.completed_stage = completed_stage;
    model.step = step;
    let expected = expected_payload_bytes(&model.layers);
    let payload = &bytes[header_len..];
    if payload.len() as u64 != expected {
        return Err(NnetError::CkptCorrupt {
            expected,
            actual: payload.len() as u64,
        });
    }
    let mut cursor = 0usize;
    let read_into = |t: &mut Vec<f64>, cursor: &mut usize| {
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(payload[*cursor..*cursor + 8].try_into().unwrap());
            *cursor += 8;
        }
    };
    // Interleaved param/momentum per tensor; same group order as save.
    let mut params = model.layers.tensors_mut();
    let mut moms = model.momentum.tensors_mut();
    for ((_, p), (_, m)) in params.iter_mut().zip(moms.iter_mut()) {
        read_into(p, &mut cursor);
        read_into(m, &mut cursor);
    }
    drop(params);
    drop(moms);
    Ok(model)
}

/// Load and verify the checkpoint matches an expected configuration
/// (seed excluded; the stored seed only documents provenance).
pub fn load_checkpoint_expecting(path: &Path, expected: &NetConfig) -> Result<ModelState> {
    let model = load_checkpoint(path)?;
    let got = model.config;
    if (
        got.height,
        got.width,
        got.base_channels,
        got.depth,
        got.out_classes,
        got.view_classes,
    ) != (
        expected.height,
        expected.width,
        expected.base_channels,
        expected.depth,
        expected.out_classes,
        expected.view_classes,
    ) {
        return Err(NnetError::CkptConfigMismatch(format!(
            "checkpoint {:?} vs expected {:?}",
            got, expected
        )));
    }
    Ok(model)
}
