//! Composite blocks: VSS, spatio-temporal token arrangements, STSS, level
//! fusion and patch embedding/merging.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Init, LayerNorm, Linear, ParamId};
use crate::scan2d::Ss2d;
use crate::ssm::Discretization;

/// How the scan branch and the gate branch of a VSS block are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateMode {
    #[default]
    Sum,
    Multiply,
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "multiply" | "mul" => Ok(Self::Multiply),
            other => Err(Error::Invalid(format!("unknown gate mode {other:?}"))),
        }
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Multiply => "multiply",
        })
    }
}

/// Hyper-parameters shared by every VSS block of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VssConfig {
    pub expand: usize,
    pub state: usize,
    pub mode: Discretization,
    pub skip: bool,
    pub gate_mode: GateMode,
    /// Zero the output projection so the block starts as the identity.
    pub zero_out_proj: bool,
}

impl Default for VssConfig {
    fn default() -> Self {
        Self {
            expand: 2,
            state: 16,
            mode: Discretization::default(),
            skip: true,
            gate_mode: GateMode::Sum,
            zero_out_proj: false,
        }
    }
}

/// 3x3 depthwise convolution parameters.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            weight: s.uniform("weight", &[3, 3, channels], 1.0 / 3.0),
            bias: s.zeros("bias", &[channels]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.depthwise_conv3x3(x, p[self.weight], p[self.bias])
    }
}

/// Dense 3x3 convolution parameters.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv3x3 {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, zeroed: bool) -> Self {
        let mut s = init.scope(name);
        let weight = if zeroed {
            s.zeros("weight", &[3, 3, cin, cout])
        } else {
            s.uniform("weight", &[3, 3, cin, cout], 1.0 / ((9 * cin) as f64).sqrt())
        };
        Self {
            weight,
            bias: s.zeros("bias", &[cout]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv3x3(x, p[self.weight], p[self.bias])
    }
}

/// Non-overlapping `k x k` stride-`k` convolution: patch embedding (`k = 4`)
/// and patch merging (`k = 2`).
#[derive(Clone, Debug)]
pub struct PatchConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub out_channels: usize,
}

impl PatchConv {
    pub fn new(init: &mut Init, name: &str, kernel: usize, cin: usize, cout: usize) -> Self {
        let mut s = init.scope(name);
        let bound = 1.0 / ((kernel * kernel * cin) as f64).sqrt();
        Self {
            weight: s.uniform("weight", &[kernel, kernel, cin, cout], bound),
            bias: s.zeros("bias", &[cout]),
            kernel,
            out_channels: cout,
        }
    }

    pub fn patch_embed(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(init, name, 4, cin, cout)
    }

    pub fn patch_merge(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(init, name, 2, cin, cout)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (h, w, _) = g.value(x).hwc()?;
        if h % self.kernel != 0 || w % self.kernel != 0 {
            return Err(Error::Invalid(format!(
                "{h}x{w} input is not divisible by the patch size {}",
                self.kernel
            )));
        }
        g.strided_conv(x, p[self.weight], p[self.bias])
    }
}

/// Visual state-space block with a residual connection around it:
/// `x + proj(LN(SS2D(silu(DWConv(e)))) ⊕ silu(gate(e)))`, `e = embed(LN(x))`.
#[derive(Clone, Debug)]
pub struct VssBlock {
    pub channels: usize,
    pub hidden: usize,
    pub gate_mode: GateMode,
    pub norm_in: LayerNorm,
    pub embed: Linear,
    pub dwconv: DepthwiseConv,
    pub ss2d: Ss2d,
    pub norm_scan: LayerNorm,
    pub gate: Linear,
    pub out_proj: Linear,
}

impl VssBlock {
    pub fn new(init: &mut Init, name: &str, channels: usize, cfg: &VssConfig) -> Self {
        let mut s = init.scope(name);
        let hidden = cfg.expand * channels;
        let out_proj = if cfg.zero_out_proj {
            Linear::zeroed(&mut s, "out_proj", hidden, channels, true)
        } else {
            Linear::new(&mut s, "out_proj", hidden, channels, true)
        };
        Self {
            channels,
            hidden,
            gate_mode: cfg.gate_mode,
            norm_in: LayerNorm::new(&mut s, "norm_in", channels),
            embed: Linear::new(&mut s, "embed", channels, hidden, true),
            dwconv: DepthwiseConv::new(&mut s, "dwconv", hidden),
            ss2d: Ss2d::new(&mut s, "ss2d", hidden, cfg.state, cfg.mode, cfg.skip),
            norm_scan: LayerNorm::new(&mut s, "norm_scan", hidden),
            gate: Linear::new(&mut s, "gate", hidden, hidden, true),
            out_proj,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (h, w, c) = g.value(x).hwc()?;
        if c != self.channels {
            return Err(Error::Shape {
                node: x.id(),
                msg: format!("VSS block expects {} channels, got {c}", self.channels),
            });
        }
        let tokens = g.reshape(x, &[h * w, c])?;
        let normed = self.norm_in.forward(g, p, tokens)?;
        let e = self.embed.forward(g, p, normed)?;

        let e_map = g.reshape(e, &[h, w, self.hidden])?;
        let conv = self.dwconv.forward(g, p, e_map)?;
        let act = g.silu(conv)?;
        let scanned = self.ss2d.forward(g, p, act)?;
        let scanned = g.reshape(scanned, &[h * w, self.hidden])?;
        let scanned = self.norm_scan.forward(g, p, scanned)?;

        let z = self.gate.forward(g, p, e)?;
        let z = g.silu(z)?;
        let mixed = match self.gate_mode {
            GateMode::Sum => g.add(scanned, z)?,
            GateMode::Multiply => g.mul(scanned, z)?,
        };
        let out = self.out_proj.forward(g, p, mixed)?;
        let out = g.reshape(out, &[h, w, c])?;
        g.add(x, out)
    }
}

fn check_pair(g: &Graph, f1: Var, f2: Var) -> Result<(usize, usize)> {
    match (g.shape(f1), g.shape(f2)) {
        (&[l, c], s2) if s2 == [l, c] => Ok((l, c)),
        (s1, s2) => Err(Error::Shape {
            node: f2.id(),
            msg: format!("temporal token sets {s1:?} and {s2:?} differ"),
        }),
    }
}

/// `[a1..an, b1..bn]`: the second epoch's tokens follow the first's.
pub fn st_tokens_sequential(g: &mut Graph, f1: Var, f2: Var) -> Result<Var> {
    check_pair(g, f1, f2)?;
    g.concat(&[f1, f2], 0)
}

/// `[a1, b1, a2, b2, ..]`: the two epochs alternate token by token.
pub fn st_tokens_cross(g: &mut Graph, f1: Var, f2: Var) -> Result<Var> {
    let (l, c) = check_pair(g, f1, f2)?;
    let a = g.reshape(f1, &[l, 1, c])?;
    let b = g.reshape(f2, &[l, 1, c])?;
    let pairs = g.concat(&[a, b], 1)?;
    g.reshape(pairs, &[2 * l, c])
}

/// `[(a1‖b1), ..]`: per-token channel concatenation.
pub fn st_tokens_parallel(g: &mut Graph, f1: Var, f2: Var) -> Result<Var> {
    check_pair(g, f1, f2)?;
    g.concat(&[f1, f2], 1)
}

fn even_tokens(g: &Graph, s: Var) -> Result<(usize, usize)> {
    match g.shape(s) {
        &[l2, c] if l2 % 2 == 0 && l2 > 0 => Ok((l2 / 2, c)),
        other => Err(Error::Shape {
            node: s.id(),
            msg: format!("cannot split {other:?} into two epochs"),
        }),
    }
}

/// Inverse of [`st_tokens_sequential`].
pub fn split_sequential(g: &mut Graph, s: Var) -> Result<(Var, Var)> {
    let (l, _) = even_tokens(g, s)?;
    Ok((g.slice(s, 0, 0, l)?, g.slice(s, 0, l, 2 * l)?))
}

/// Inverse of [`st_tokens_cross`].
pub fn split_cross(g: &mut Graph, s: Var) -> Result<(Var, Var)> {
    let (l, c) = even_tokens(g, s)?;
    let pairs = g.reshape(s, &[l, 2, c])?;
    let a = g.slice(pairs, 1, 0, 1)?;
    let b = g.slice(pairs, 1, 1, 2)?;
    Ok((g.reshape(a, &[l, c])?, g.reshape(b, &[l, c])?))
}

/// Inverse of [`st_tokens_parallel`].
pub fn split_parallel(g: &mut Graph, s: Var) -> Result<(Var, Var)> {
    let c2 = match g.shape(s) {
        &[_, c2] if c2 % 2 == 0 && c2 > 0 => c2,
        other => {
            return Err(Error::Shape {
                node: s.id(),
                msg: format!("cannot split channels of {other:?}"),
            })
        }
    };
    Ok((g.slice(s, 1, 0, c2 / 2)?, g.slice(s, 1, c2 / 2, c2)?))
}

/// Spatio-temporal state-space block: the sequential, cross and parallel
/// arrangements are each modelled by their own VSS block, mapped back to
/// `H x W x C` and fused by a bias-free projection.
#[derive(Clone, Debug)]
pub struct StssBlock {
    pub channels: usize,
    pub sequential: VssBlock,
    pub cross: VssBlock,
    pub parallel: VssBlock,
    pub parallel_proj: Linear,
    pub out_proj: Linear,
}

impl StssBlock {
    pub fn new(init: &mut Init, name: &str, channels: usize, cfg: &VssConfig) -> Self {
        let mut s = init.scope(name);
        Self {
            channels,
            sequential: VssBlock::new(&mut s, "sequential", channels, cfg),
            cross: VssBlock::new(&mut s, "cross", channels, cfg),
            parallel: VssBlock::new(&mut s, "parallel", 2 * channels, cfg),
            parallel_proj: Linear::new(&mut s, "parallel_proj", 2 * channels, channels, false),
            out_proj: Linear::new(&mut s, "out_proj", 3 * channels, channels, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f1: Var, f2: Var) -> Result<Var> {
        let (h, w, c) = g.value(f1).hwc()?;
        if g.shape(f2) != [h, w, c] {
            return Err(Error::Shape {
                node: f2.id(),
                msg: format!("epochs {:?} and {:?} are not co-registered", g.shape(f1), g.shape(f2)),
            });
        }
        let t1 = g.reshape(f1, &[h * w, c])?;
        let t2 = g.reshape(f2, &[h * w, c])?;

        // second epoch stacked below the first
        let seq = st_tokens_sequential(g, t1, t2)?;
        let seq = g.reshape(seq, &[2 * h, w, c])?;
        let seq = self.sequential.forward(g, p, seq)?;
        let seq = g.reshape(seq, &[2 * h * w, c])?;
        let (a, b) = split_sequential(g, seq)?;
        let seq = g.add(a, b)?;

        // epochs interleaved along the width
        let crs = st_tokens_cross(g, t1, t2)?;
        let crs = g.reshape(crs, &[h, 2 * w, c])?;
        let crs = self.cross.forward(g, p, crs)?;
        let crs = g.reshape(crs, &[2 * h * w, c])?;
        let (a, b) = split_cross(g, crs)?;
        let crs = g.add(a, b)?;

        let par = st_tokens_parallel(g, t1, t2)?;
        let par = g.reshape(par, &[h, w, 2 * c])?;
        let par = self.parallel.forward(g, p, par)?;
        let par = g.reshape(par, &[h * w, 2 * c])?;
        let par = self.parallel_proj.forward(g, p, par)?;

        let all = g.concat(&[seq, crs, par], 1)?;
        let out = self.out_proj.forward(g, p, all)?;
        g.reshape(out, &[h, w, c])
    }
}

/// `s = high + conv1x1(low)`, then `s + silu(conv(silu(conv(s))))`.
#[derive(Clone, Debug)]
pub struct FuseLevels {
    pub lateral: Linear,
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
}

impl FuseLevels {
    pub fn new(init: &mut Init, name: &str, c_high: usize, c_low: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            lateral: Linear::new(&mut s, "lateral", c_low, c_high, true),
            conv1: Conv3x3::new(&mut s, "conv1", c_high, c_high, false),
            conv2: Conv3x3::new(&mut s, "conv2", c_high, c_high, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, high: Var, low: Var) -> Result<Var> {
        let (h, w, _) = g.value(high).hwc()?;
        let (hl, wl, _) = g.value(low).hwc()?;
        if (h, w) != (hl, wl) {
            return Err(Error::Shape {
                node: low.id(),
                msg: format!("fusing {hl}x{wl} into {h}x{w}"),
            });
        }
        let mapped = self.lateral.forward_map(g, p, low)?;
        let s = g.add(high, mapped)?;
        let r = self.conv1.forward(g, p, s)?;
        let r = g.silu(r)?;
        let r = self.conv2.forward(g, p, r)?;
        let r = g.silu(r)?;
        g.add(s, r)
    }
}
