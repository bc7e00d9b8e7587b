//! Reconstruction network: 3D convolutions interleaved with unshifted window attention.
//!
//! Layout, for `C` channels and `n_blocks` blocks:
//!
//! ```text
//! [2,T,H,W] -> conv3d(2->C) -> n_blocks x {
//!     tokens = windows(x)
//!     tokens += W-MSA(LN(tokens))
//!     tokens += MLP(LN(tokens))
//!     x = unwindow(tokens); x += conv3d(x)
//! } -> conv3d(C->1) -> [T,H,W]
//! ```
//!
//! Inputs whose dims are not multiples of the window are zero-padded symmetrically and
//! the output is cropped back.

mod checkpoint;
mod export;
mod window;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::DynVolume;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use export::{export_attention, AttentionRegion};
pub use window::{window_partition, window_unpartition, Window};

const KERNEL: usize = 3;
const OUTPUT_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub channels: usize,
    pub n_blocks: usize,
    pub heads: usize,
    pub window: Window,
    pub mlp_ratio: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            channels: 16,
            n_blocks: 2,
            heads: 4,
            window: (2, 4, 4),
            mlp_ratio: 2.0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::invalid(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        if self.window.0 == 0 || self.window.1 == 0 || self.window.2 == 0 {
            return Err(Error::invalid(format!("window {:?} has a zero extent", self.window)));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return Err(Error::invalid(format!("mlp_ratio {} too small", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        (self.channels as f64 * self.mlp_ratio).round() as usize
    }

    pub fn tokens(&self) -> usize {
        self.window.0 * self.window.1 * self.window.2
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let hid = self.hidden();
        let k = KERNEL;
        let mut v = vec![
            ("in_conv.weight".to_string(), vec![c, 2, k, k, k]),
            ("in_conv.bias".to_string(), vec![c]),
        ];
        for b in 0..self.n_blocks {
            let p = |s: &str| format!("block{}.{}", b, s);
            v.extend([
                (p("ln1.gamma"), vec![c]),
                (p("ln1.beta"), vec![c]),
                (p("attn.qkv.weight"), vec![c, 3 * c]),
                (p("attn.qkv.bias"), vec![3 * c]),
                (p("attn.proj.weight"), vec![c, c]),
                (p("attn.proj.bias"), vec![c]),
                (p("ln2.gamma"), vec![c]),
                (p("ln2.beta"), vec![c]),
                (p("mlp.fc1.weight"), vec![c, hid]),
                (p("mlp.fc1.bias"), vec![hid]),
                (p("mlp.fc2.weight"), vec![hid, c]),
                (p("mlp.fc2.bias"), vec![c]),
                (p("conv.weight"), vec![c, c, k, k, k]),
                (p("conv.bias"), vec![c]),
            ]);
        }
        v.push(("out_conv.weight".to_string(), vec![1, c, k, k, k]));
        v.push(("out_conv.bias".to_string(), vec![1]));
        v
    }
}

/// Network parameters θ in [`ReconConfig::param_specs`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ReconParams {
    /// Weights ~ N(0, gain^2/fan_in); biases and LN shifts zero; LN gains one. Layers
    /// that close a residual branch and the output layer start with a reduced gain.
    pub fn init(cfg: &ReconConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in cfg.param_specs() {
            let t = if name.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = if shape.len() == 5 { shape[1..].iter().product() } else { shape[0] };
                let gain = init_gain(&name, cfg.n_blocks);
                let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(ReconParams { names, tensors })
    }

    pub fn validate(&self, cfg: &ReconConfig) -> Result<()> {
        let specs = cfg.param_specs();
        if specs.len() != self.tensors.len() || self.names.len() != self.tensors.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (n, t)) in specs.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::shape(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    n,
                    t.shape(),
                    name,
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Adds every tensor to `g`, trainable or constant.
    pub fn to_graph(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }
}

fn init_gain(name: &str, n_blocks: usize) -> f64 {
    if name.starts_with("out_conv") {
        OUTPUT_GAIN
    } else if name.ends_with("proj.weight") || name.ends_with("fc2.weight") || name.ends_with("conv.weight") && name.starts_with("block") {
        1.0 / ((3 * n_blocks.max(1)) as f64).sqrt()
    } else {
        1.0
    }
}

/// Softmax weights of one attention layer, `[n_windows, heads, tokens, tokens]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub weights: Tensor,
    pub window: Window,
    /// Windows along (T, H, W).
    pub grid: [usize; 3],
    /// Unpadded input dims (T, H, W).
    pub dims: [usize; 3],
    /// Zeros inserted before each axis to reach a window multiple.
    pub pad_before: [usize; 3],
}

impl AttentionRecord {
    pub fn n_windows(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.weights.shape()[2]
    }

    /// One `tokens x tokens` matrix.
    pub fn map(&self, window: usize, head: usize) -> &[f64] {
        let n = self.tokens();
        let start = (window * self.heads() + head) * n * n;
        &self.weights.data()[start..start + n * n]
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

/// Attention-layer parameters for the standalone [`wmsa_forward`].
#[derive(Clone, Debug)]
pub struct WmsaParams {
    /// `[C, 3C]`, columns ordered (q, k, v) then head.
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

struct WmsaVars {
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
}

/// Multi-head self-attention within each window of `tokens` `[nW, n, C]`; returns the
/// projected output `[nW, n, C]` and the softmax weights `[nW, heads, n, n]`.
fn wmsa_graph(g: &mut Graph, tokens: Var, p: &WmsaVars, heads: usize) -> Result<(Var, Var)> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("attention tokens must be [nW, n, C], got {:?}", s)));
    }
    let (nw, n, c) = (s[0], s[1], s[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid(format!("channels {} not divisible by heads {}", c, heads)));
    }
    let d = c / heads;
    let flat = g.reshape(tokens, &[nw * n, c])?;
    let qkv = g.matmul(flat, p.qkv_w)?;
    let qkv = g.add_bias(qkv, p.qkv_b)?;
    let qkv = g.reshape(qkv, &[nw, n, 3, heads, d])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, &[3 * nw * heads, n, d])?;
    let q = g.slice(qkv, 0, 0, nw * heads)?;
    let k = g.slice(qkv, 0, nw * heads, nw * heads)?;
    let v = g.slice(qkv, 0, 2 * nw * heads, nw * heads)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = g.softmax(scores, 2)?;
    let out = g.bmm(attn, v, false)?;
    let out = g.reshape(out, &[nw, heads, n, d])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[nw * n, c])?;
    let out = g.matmul(out, p.proj_w)?;
    let out = g.add_bias(out, p.proj_b)?;
    let out = g.reshape(out, &[nw, n, c])?;
    let attn = g.reshape(attn, &[nw, heads, n, n])?;
    Ok((out, attn))
}

/// Standalone window attention on `[n_windows, tokens, C]`.
pub fn wmsa_forward(tokens: &Tensor, params: &WmsaParams, heads: usize) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let x = g.constant(tokens.clone())?;
    let vars = WmsaVars {
        qkv_w: g.constant(params.qkv_weight.clone())?,
        qkv_b: g.constant(params.qkv_bias.clone())?,
        proj_w: g.constant(params.proj_weight.clone())?,
        proj_b: g.constant(params.proj_bias.clone())?,
    };
    let (out, attn) = wmsa_graph(&mut g, x, &vars, heads)?;
    Ok((g.value(out).clone(), g.value(attn).clone()))
}

/// Symmetric padding `(before, after)` that rounds `n` up to a multiple of `w`.
fn pad_to(n: usize, w: usize) -> (usize, usize) {
    let total = (w - n % w) % w;
    (total / 2, total - total / 2)
}

/// Network forward inside a graph. `input` is `[2, T, H, W]`; `params` are the vars from
/// [`ReconParams::to_graph`]. Returns the `[T, H, W]` output and, when asked, one
/// attention record per block.
pub fn recon_graph(
    g: &mut Graph,
    input: Var,
    cfg: &ReconConfig,
    params: &[Var],
    record: bool,
) -> Result<(Var, Vec<AttentionRecord>)> {
    cfg.validate()?;
    let specs = cfg.param_specs();
    if params.len() != specs.len() {
        return Err(Error::shape(format!(
            "network needs {} parameter vars, got {}",
            specs.len(),
            params.len()
        )));
    }
    for (v, (name, shape)) in params.iter().zip(&specs) {
        if g.shape(*v) != shape.as_slice() {
            return Err(Error::shape(format!("{}: {:?} vs {:?}", name, g.shape(*v), shape)));
        }
    }
    let s = g.shape(input).to_vec();
    if s.len() != 4 || s[0] != 2 {
        return Err(Error::shape(format!("network input must be [2,T,H,W], got {:?}", s)));
    }
    let dims = [s[1], s[2], s[3]];
    let wdims = [cfg.window.0, cfg.window.1, cfg.window.2];
    let pads: Vec<(usize, usize)> = dims.iter().zip(&wdims).map(|(&n, &w)| pad_to(n, w)).collect();
    let mut x = input;
    for (axis, &(before, after)) in pads.iter().enumerate() {
        if before + after > 0 {
            x = g.pad(x, axis + 1, before, after)?;
        }
    }
    let pdims = [dims[0] + pads[0].0 + pads[0].1, dims[1] + pads[1].0 + pads[1].1, dims[2] + pads[2].0 + pads[2].1];
    let grid = window::window_counts(pdims, cfg.window)?;

    let mut p = Cursor { vars: params, next: 0 };
    let x0 = g.conv3d(x, p.take())?;
    let mut x = g.add_channel_bias(x0, p.take())?;
    let mut records = Vec::new();
    for _ in 0..cfg.n_blocks {
        let (ln1_g, ln1_b) = (p.take(), p.take());
        let attn_vars = WmsaVars {
            qkv_w: p.take(),
            qkv_b: p.take(),
            proj_w: p.take(),
            proj_b: p.take(),
        };
        let (ln2_g, ln2_b) = (p.take(), p.take());
        let (fc1_w, fc1_b, fc2_w, fc2_b) = (p.take(), p.take(), p.take(), p.take());
        let (conv_w, conv_b) = (p.take(), p.take());

        let tokens = window::partition_graph(g, x, cfg.window)?;
        let h = g.layer_norm(tokens, ln1_g, ln1_b)?;
        let (a, attn) = wmsa_graph(g, h, &attn_vars, cfg.heads)?;
        if record {
            records.push(AttentionRecord {
                weights: g.value(attn).clone(),
                window: cfg.window,
                grid,
                dims,
                pad_before: [pads[0].0, pads[1].0, pads[2].0],
            });
        }
        let tokens = g.add(tokens, a)?;

        let h = g.layer_norm(tokens, ln2_g, ln2_b)?;
        let [nw, n, c] = [g.shape(h)[0], g.shape(h)[1], g.shape(h)[2]];
        let h = g.reshape(h, &[nw * n, c])?;
        let h = g.matmul(h, fc1_w)?;
        let h = g.add_bias(h, fc1_b)?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, fc2_w)?;
        let h = g.add_bias(h, fc2_b)?;
        let h = g.reshape(h, &[nw, n, c])?;
        let tokens = g.add(tokens, h)?;

        let y = window::unpartition_graph(g, tokens, pdims, cfg.window)?;
        let r = g.conv3d(y, conv_w)?;
        let r = g.add_channel_bias(r, conv_b)?;
        x = g.add(y, r)?;
    }
    let out = g.conv3d(x, p.take())?;
    let mut out = g.add_channel_bias(out, p.take())?;
    for (axis, &(before, _)) in pads.iter().enumerate() {
        if pdims[axis] != dims[axis] {
            out = g.slice(out, axis + 1, before, dims[axis])?;
        }
    }
    let out = g.reshape(out, &dims)?;
    Ok((out, records))
}

/// Inference with fixed θ on a `[2, T, H, W]` regridded input.
pub fn recon_forward(
    z_regrid: &Tensor,
    cfg: &ReconConfig,
    params: &ReconParams,
    record: bool,
) -> Result<(DynVolume, Option<Vec<AttentionRecord>>)> {
    params.validate(cfg)?;
    let mut g = Graph::new();
    let input = g.constant(z_regrid.clone())?;
    let vars = params.to_graph(&mut g, false)?;
    let (out, records) = recon_graph(&mut g, input, cfg, &vars, record)?;
    let vol = DynVolume::from_tensor(g.value(out))?;
    Ok((vol, record.then_some(records)))
}
