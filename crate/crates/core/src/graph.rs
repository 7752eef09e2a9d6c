//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and appends one node to the graph, so
//! node ids are already a topological order. `backward` walks the ids in
//! strict reverse order, which makes gradient accumulation bit-reproducible.
//!
//! Feature maps use an `H x W x C` (channels-last) layout throughout.

use std::cell::Cell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::losses::lovasz_forward_backward;
use crate::ssm::{scan_backward, scan_forward, Discretization, ScanDims};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale,
    Silu,
    Softplus,
    Exp,
    Log,
    ClampMin,
    Softmax,
    LayerNorm,
    DepthwiseConv3x3,
    Conv3x3,
    StridedConv,
    Concat,
    Slice,
    Reshape,
    Gather,
    UpsampleNearest,
    AvgPool,
    Sum,
    Mean,
    SelectiveScan,
    LovaszSoftmax,
    Argmax,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 28] = [
        Self::Leaf,
        Self::MatMul,
        Self::AddBias,
        Self::Add,
        Self::Sub,
        Self::Mul,
        Self::Scale,
        Self::Silu,
        Self::Softplus,
        Self::Exp,
        Self::Log,
        Self::ClampMin,
        Self::Softmax,
        Self::LayerNorm,
        Self::DepthwiseConv3x3,
        Self::Conv3x3,
        Self::StridedConv,
        Self::Concat,
        Self::Slice,
        Self::Reshape,
        Self::Gather,
        Self::UpsampleNearest,
        Self::AvgPool,
        Self::Sum,
        Self::Mean,
        Self::SelectiveScan,
        Self::LovaszSoftmax,
        Self::Argmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Leaf => "leaf",
            Self::MatMul => "matmul",
            Self::AddBias => "add_bias",
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Scale => "scale",
            Self::Silu => "silu",
            Self::Softplus => "softplus",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::ClampMin => "clamp_min",
            Self::Softmax => "softmax",
            Self::LayerNorm => "layer_norm",
            Self::DepthwiseConv3x3 => "depthwise_conv3x3",
            Self::Conv3x3 => "conv3x3",
            Self::StridedConv => "strided_conv",
            Self::Concat => "concat",
            Self::Slice => "slice",
            Self::Reshape => "reshape",
            Self::Gather => "gather",
            Self::UpsampleNearest => "upsample_nearest",
            Self::AvgPool => "avg_pool",
            Self::Sum => "sum",
            Self::Mean => "mean",
            Self::SelectiveScan => "selective_scan",
            Self::LovaszSoftmax => "lovasz_softmax",
            Self::Argmax => "argmax",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// `false` only for piecewise-constant outputs.
    pub fn is_differentiable(self) -> bool {
        !matches!(self, Self::Argmax)
    }
}

thread_local! {
    static CORRUPTED: Cell<Option<PrimitiveKind>> = const { Cell::new(None) };
}

/// Runs `f` with the backward rule of `kind` deliberately perturbed on the
/// current thread. Used as a negative control for gradient checking.
pub fn with_corrupted_backward<R>(kind: PrimitiveKind, f: impl FnOnce() -> R) -> R {
    struct Reset(Option<PrimitiveKind>);
    impl Drop for Reset {
        fn drop(&mut self) {
            CORRUPTED.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(CORRUPTED.with(|c| c.replace(Some(kind))));
    f()
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    DwConv3x3 {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
    },
    StridedConv {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Sum(Var),
    Mean(Var),
    SelectiveScan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Option<Var>,
        mode: Discretization,
        states: Vec<f64>,
    },
    Lovasz {
        probs: Var,
        dprobs: Vec<f64>,
    },
    Argmax(Var),
}

impl Op {
    fn kind(&self) -> PrimitiveKind {
        use PrimitiveKind as K;
        match self {
            Op::Leaf => K::Leaf,
            Op::MatMul(..) => K::MatMul,
            Op::AddBias(..) => K::AddBias,
            Op::Add(..) => K::Add,
            Op::Sub(..) => K::Sub,
            Op::Mul(..) => K::Mul,
            Op::Scale(..) => K::Scale,
            Op::Silu(_) => K::Silu,
            Op::Softplus(_) => K::Softplus,
            Op::Exp(_) => K::Exp,
            Op::Log(_) => K::Log,
            Op::ClampMin(..) => K::ClampMin,
            Op::Softmax(_) => K::Softmax,
            Op::LayerNorm { .. } => K::LayerNorm,
            Op::DwConv3x3 { .. } => K::DepthwiseConv3x3,
            Op::Conv3x3 { .. } => K::Conv3x3,
            Op::StridedConv { .. } => K::StridedConv,
            Op::Concat { .. } => K::Concat,
            Op::Slice { .. } => K::Slice,
            Op::Reshape(_) => K::Reshape,
            Op::Gather { .. } => K::Gather,
            Op::UpsampleNearest { .. } => K::UpsampleNearest,
            Op::AvgPool { .. } => K::AvgPool,
            Op::Sum(_) => K::Sum,
            Op::Mean(_) => K::Mean,
            Op::SelectiveScan { .. } => K::SelectiveScan,
            Op::Lovasz { .. } => K::LovaszSoftmax,
            Op::Argmax(_) => K::Argmax,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Silu(x)
            | Op::Softplus(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::ClampMin(x, _)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Argmax(x) => vec![*x],
            Op::Slice { x, .. }
            | Op::Gather { x, .. }
            | Op::UpsampleNearest { x, .. }
            | Op::AvgPool { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::DwConv3x3 { x, w, b } | Op::Conv3x3 { x, w, b } | Op::StridedConv { x, w, b, .. } => {
                vec![*x, *w, *b]
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::SelectiveScan {
                x, delta, a, b, c, d, ..
            } => {
                let mut v = vec![*x, *delta, *a, *b, *c];
                v.extend(d);
                v
            }
            Op::Lovasz { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Tape of eagerly evaluated primitive applications.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err<T>(node: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        node,
        msg: msg.into(),
    })
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, axis_len, inner)` view of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> PrimitiveKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().fill(0.0);
            }
        }
    }

    /// Kinds of all non-differentiable nodes that depend on a trainable leaf.
    pub fn non_differentiable_nodes(&self) -> Vec<(usize, PrimitiveKind)> {
        let mut depends = vec![false; self.nodes.len()];
        let mut found = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            depends[i] = match node.op {
                Op::Leaf => node.requires_grad,
                _ => node.op.inputs().iter().any(|v| depends[v.0]),
            };
            let kind = node.op.kind();
            if depends[i] && !kind.is_differentiable() {
                found.push((i, kind));
            }
        }
        found
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros(value.shape()));
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        let kind = op.kind();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: id,
                kind: kind.name(),
            });
        }
        let requires_grad =
            kind.is_differentiable() && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(id))
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(
                self.next_id(),
                format!("operands have shapes {:?} and {:?}", self.shape(a), self.shape(b)),
            );
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        self.push(out, op)
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => {
                return shape_err(self.next_id(), format!("matmul of {sa:?} and {sb:?}"));
            }
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                if s == 0.0 {
                    continue;
                }
                for (o, bv) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += s * bv;
                }
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// Adds a `[C]` vector to every row of a `[..., C]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return shape_err(
                self.next_id(),
                format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x)),
            );
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += v;
        }
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o -= v;
        }
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= v;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map_unary(x, |v| v * s, Op::Scale(x, s))
    }

    /// Sums several same-shape tensors left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Invalid("add_all of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, |v| v.max(0.0) + (-v.abs()).exp().ln_1p(), Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, f64::ln, Op::Log(x))
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Result<Var> {
        self.map_unary(x, |v| v.max(min), Op::ClampMin(x, min))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let k = match src.shape().last() {
            Some(&k) if k > 0 => k,
            _ => return shape_err(self.next_id(), "softmax needs a non-empty last axis"),
        };
        let mut out = src.clone();
        for row in out.data_mut().chunks_exact_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    /// Normalizes each row of the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if c == 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(
                self.next_id(),
                format!(
                    "layer_norm of {:?} with gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            );
        }
        let src = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.numel() / c;
        let mut xhat = Vec::with_capacity(src.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.numel());
        for row in src.data().chunks_exact(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (i, v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                out.push(xh * g[i] + b[i]);
            }
        }
        let out = Tensor::new(src.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// 3x3 depthwise convolution, stride 1, zero padding 1.
    /// `x: [H, W, C]`, `w: [3, 3, C]`, `b: [C]`.
    pub fn depthwise_conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, c) = self.value(x).hwc()?;
        if self.shape(w) != [3, 3, c] || self.shape(b) != [c] {
            return shape_err(
                self.next_id(),
                format!("depthwise weights {:?} for {c} channels", self.shape(w)),
            );
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; h * wd * c];
        for r in 0..h {
            for col in 0..wd {
                let o = &mut out[(r * wd + col) * c..(r * wd + col + 1) * c];
                o.copy_from_slice(bv);
                for (kr, kc, rr, cc) in taps(r, col, h, wd) {
                    let xs = &xv[(rr * wd + cc) * c..(rr * wd + cc + 1) * c];
                    let ws = &wv[(kr * 3 + kc) * c..(kr * 3 + kc + 1) * c];
                    for ((o, x), w) in o.iter_mut().zip(xs).zip(ws) {
                        *o += x * w;
                    }
                }
            }
        }
        self.push(Tensor::new(vec![h, wd, c], out)?, Op::DwConv3x3 { x, w, b })
    }

    /// Dense 3x3 convolution, stride 1, zero padding 1.
    /// `x: [H, W, Ci]`, `w: [3, 3, Ci, Co]`, `b: [Co]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, ci) = self.value(x).hwc()?;
        let co = match self.shape(w) {
            &[3, 3, i, o] if i == ci => o,
            s => return shape_err(self.next_id(), format!("conv3x3 weights {s:?} for {ci} input channels")),
        };
        if self.shape(b) != [co] {
            return shape_err(self.next_id(), format!("conv3x3 bias {:?}", self.shape(b)));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; h * wd * co];
        for r in 0..h {
            for col in 0..wd {
                let o = &mut out[(r * wd + col) * co..(r * wd + col + 1) * co];
                o.copy_from_slice(bv);
                for (kr, kc, rr, cc) in taps(r, col, h, wd) {
                    let xs = &xv[(rr * wd + cc) * ci..(rr * wd + cc + 1) * ci];
                    let wk = &wv[(kr * 3 + kc) * ci * co..(kr * 3 + kc + 1) * ci * co];
                    for (i, &xi) in xs.iter().enumerate() {
                        for (o, w) in o.iter_mut().zip(&wk[i * co..(i + 1) * co]) {
                            *o += xi * w;
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(vec![h, wd, co], out)?, Op::Conv3x3 { x, w, b })
    }

    /// Non-overlapping `k x k` convolution with stride `k`.
    /// `x: [H, W, Ci]`, `w: [k, k, Ci, Co]`, `b: [Co]`.
    pub fn strided_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, ci) = self.value(x).hwc()?;
        let (k, co) = match self.shape(w) {
            &[k1, k2, i, o] if k1 == k2 && k1 > 0 && i == ci => (k1, o),
            s => return shape_err(self.next_id(), format!("strided conv weights {s:?} for {ci} input channels")),
        };
        if h % k != 0 || wd % k != 0 {
            return shape_err(
                self.next_id(),
                format!("spatial extent {h}x{wd} is not divisible by stride {k}"),
            );
        }
        if self.shape(b) != [co] {
            return shape_err(self.next_id(), format!("strided conv bias {:?}", self.shape(b)));
        }
        let (ho, wo) = (h / k, wd / k);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; ho * wo * co];
        for r in 0..ho {
            for col in 0..wo {
                let o = &mut out[(r * wo + col) * co..(r * wo + col + 1) * co];
                o.copy_from_slice(bv);
                for kr in 0..k {
                    for kc in 0..k {
                        let (rr, cc) = (r * k + kr, col * k + kc);
                        let xs = &xv[(rr * wd + cc) * ci..(rr * wd + cc + 1) * ci];
                        let wk = &wv[(kr * k + kc) * ci * co..(kr * k + kc + 1) * ci * co];
                        for (i, &xi) in xs.iter().enumerate() {
                            for (o, w) in o.iter_mut().zip(&wk[i * co..(i + 1) * co]) {
                                *o += xi * w;
                            }
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(vec![ho, wo, co], out)?, Op::StridedConv { x, w, b, k })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err(self.next_id(), "concat of no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(self.next_id(), format!("concat axis {axis} for rank {}", base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err(self.next_id(), format!("concat of {base:?} and {s:?} along {axis}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        if axis >= src_shape.len() || start >= end || end > src_shape[axis] {
            return shape_err(
                self.next_id(),
                format!("slice {start}..{end} along axis {axis} of {src_shape:?}"),
            );
        }
        let (outer, len, inner) = split_at_axis(&src_shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = end - start;
        self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return shape_err(
                self.next_id(),
                format!("cannot reshape {:?} into {shape:?}", self.shape(x)),
            );
        }
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// Selects rows (entries of the first axis) by index; repeated indices
    /// are allowed and their gradients add up.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&rows) = shape.first() else {
            return shape_err(self.next_id(), "gather from a scalar");
        };
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return shape_err(self.next_id(), format!("gather index {bad} out of {rows} rows"));
        }
        let row_len: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * row_len);
        for &i in index.iter() {
            out.extend_from_slice(&src[i * row_len..(i + 1) * row_len]);
        }
        let mut new_shape = shape;
        new_shape[0] = index.len();
        self.push(Tensor::new(new_shape, out)?, Op::Gather { x, index })
    }

    /// Nearest-neighbour upsampling of an `H x W x C` map by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        if factor == 0 {
            return shape_err(self.next_id(), "upsample factor must be positive");
        }
        let src = self.value(x).data();
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(ho * wo * c);
        for r in 0..ho {
            for col in 0..wo {
                let s = ((r / factor) * w + col / factor) * c;
                out.extend_from_slice(&src[s..s + c]);
            }
        }
        self.push(Tensor::new(vec![ho, wo, c], out)?, Op::UpsampleNearest { x, factor })
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return shape_err(self.next_id(), format!("pool {k} on {h}x{w}"));
        }
        let src = self.value(x).data();
        let (ho, wo) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; ho * wo * c];
        for r in 0..h {
            for col in 0..w {
                let o = ((r / k) * wo + col / k) * c;
                let s = (r * w + col) * c;
                for ch in 0..c {
                    out[o + ch] += src[s + ch] * norm;
                }
            }
        }
        self.push(Tensor::new(vec![ho, wo, c], out)?, Op::AvgPool { x, k })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return shape_err(self.next_id(), "mean of an empty tensor");
        }
        let s = self.value(x).sum() / n as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Selective scan over `x: [L, D]` with per-step `delta: [L, D]`,
    /// `b, c: [L, N]`, diagonal `a: [D, N]` and optional skip gain `d: [D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Option<Var>,
        mode: Discretization,
    ) -> Result<Var> {
        let id = self.next_id();
        let (l, d_ch) = match self.shape(x) {
            &[l, dc] if l > 0 => (l, dc),
            s => return shape_err(id, format!("scan input {s:?}")),
        };
        let n_st = match self.shape(a) {
            &[dc, n] if dc == d_ch => n,
            s => return shape_err(id, format!("state matrix {s:?} for {d_ch} channels")),
        };
        let ok = self.shape(delta) == [l, d_ch]
            && self.shape(b) == [l, n_st]
            && self.shape(c) == [l, n_st]
            && d.is_none_or(|d| self.shape(d) == [d_ch]);
        if !ok {
            return shape_err(id, format!("scan parameters inconsistent with L={l}, D={d_ch}, N={n_st}"));
        }
        if let Some(bad) = self.value(delta).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("time scale must be positive, got {bad}")));
        }
        let dims = ScanDims {
            len: l,
            channels: d_ch,
            state: n_st,
        };
        let mut states = Vec::new();
        let y = scan_forward(
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            d.map(|d| self.value(d).data()),
            dims,
            mode,
            Some(&mut states),
        );
        self.push(
            Tensor::new(vec![l, d_ch], y)?,
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                d,
                mode,
                states,
            },
        )
    }

    /// Lovász-softmax over `probs: [T, K]` (already normalized) against
    /// per-row labels; rows labelled `ignore` are skipped.
    pub fn lovasz_softmax(&mut self, probs: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let k = match self.shape(probs) {
            &[t, k] if t == labels.len() => k,
            s => {
                return shape_err(
                    self.next_id(),
                    format!("lovasz over {s:?} with {} labels", labels.len()),
                )
            }
        };
        let (loss, dprobs) = lovasz_forward_backward(self.value(probs).data(), k, labels, ignore)?;
        self.push(Tensor::scalar(loss), Op::Lovasz { probs, dprobs })
    }

    /// Index of the largest entry along the last axis (lowest index on ties),
    /// returned as floats. Not differentiable.
    pub fn argmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&k, rest)) = shape.split_last() else {
            return shape_err(self.next_id(), "argmax of a scalar");
        };
        let data = self
            .value(x)
            .data()
            .chunks_exact(k)
            .map(|row| crate::label::argmax_row(row) as f64)
            .collect();
        self.push(Tensor::new(rest.to_vec(), data)?, Op::Argmax(x))
    }

    /// Backpropagates `cotangent` from `seed`, accumulating into the `grad`
    /// of every trainable leaf. Calls accumulate until [`Graph::zero_grad`].
    pub fn backward(&mut self, seed: Var, cotangent: &Tensor) -> Result<()> {
        if seed.0 >= self.nodes.len() {
            return Err(Error::Invalid(format!("seed node {} is not in the graph", seed.0)));
        }
        if cotangent.shape() != self.shape(seed) {
            return shape_err(
                seed.0,
                format!(
                    "cotangent {:?} for output {:?}",
                    cotangent.shape(),
                    self.shape(seed)
                ),
            );
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(cotangent.data().to_vec());
        let corrupted = CORRUPTED.with(|c| c.get());
        for i in (0..=seed.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(acc) = self.nodes[i].grad.as_mut() {
                    for (a, g) in acc.data_mut().iter_mut().zip(&gy) {
                        *a += g;
                    }
                }
                continue;
            }
            let mut contributions = self.backprop_node(i, &gy)?;
            if corrupted == Some(self.nodes[i].op.kind()) {
                for (_, g) in &mut contributions {
                    for v in g.iter_mut() {
                        *v = *v * 1.1 + 1e-3;
                    }
                }
            }
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its inputs.
    fn backprop_node(&self, i: usize, gy: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf | Op::Argmax(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        let gr = &gy[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] = gr.iter().zip(&bv[p * n..(p + 1) * n]).map(|(g, b)| g * b).sum();
                        }
                    }
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let gr = &gy[r * n..(r + 1) * n];
                        for p in 0..k {
                            let s = av[r * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            for (o, g) in gb[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *o += s * g;
                            }
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::AddBias(x, b) => {
                let c = self.shape(*b)[0];
                if needs(*b) {
                    let mut gb = vec![0.0; c];
                    for row in gy.chunks_exact(c) {
                        for (o, g) in gb.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    out.push((*b, gb));
                }
                out.push((*x, gy.to_vec()));
            }
            Op::Add(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.iter().map(|g| -g).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                out.push((*a, gy.iter().zip(bv).map(|(g, b)| g * b).collect()));
                out.push((*b, gy.iter().zip(av).map(|(g, a)| g * a).collect()));
            }
            Op::Scale(x, s) => out.push((*x, gy.iter().map(|g| g * s).collect())),
            Op::Silu(x) => {
                let g = gy
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| {
                        let s = sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                out.push((*x, g));
            }
            Op::Softplus(x) => {
                out.push((*x, gy.iter().zip(val(*x)).map(|(g, &v)| g * sigmoid(v)).collect()));
            }
            Op::Exp(x) => out.push((*x, gy.iter().zip(y).map(|(g, y)| g * y).collect())),
            Op::Log(x) => out.push((*x, gy.iter().zip(val(*x)).map(|(g, v)| g / v).collect())),
            Op::ClampMin(x, m) => {
                let g = gy
                    .iter()
                    .zip(val(*x))
                    .map(|(g, v)| if v > m { *g } else { 0.0 })
                    .collect();
                out.push((*x, g));
            }
            Op::Softmax(x) => {
                let k = *self.shape(*x).last().unwrap();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), o) in gy.chunks_exact(k).zip(y.chunks_exact(k)).zip(g.chunks_exact_mut(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, g));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.shape(*gamma)[0];
                let gam = val(*gamma);
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut gx = vec![0.0; gy.len()];
                for (r, (gr, xr)) in gy.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for j in 0..c {
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                        let gh = gr[j] * gam[j];
                        mean_g += gh;
                        mean_gx += gh * xr[j];
                    }
                    mean_g /= c as f64;
                    mean_gx /= c as f64;
                    for j in 0..c {
                        gx[r * c + j] = rstd[r] * (gr[j] * gam[j] - mean_g - xr[j] * mean_gx);
                    }
                }
                out.push((*x, gx));
                out.push((*gamma, gg));
                out.push((*beta, gb));
            }
            Op::DwConv3x3 { x, w, b } => {
                let (h, wd, c) = self.value(*x).hwc()?;
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; c];
                for r in 0..h {
                    for col in 0..wd {
                        let g = &gy[(r * wd + col) * c..(r * wd + col + 1) * c];
                        for (o, v) in gb.iter_mut().zip(g) {
                            *o += v;
                        }
                        for (kr, kc, rr, cc) in taps(r, col, h, wd) {
                            let xo = (rr * wd + cc) * c;
                            let wo = (kr * 3 + kc) * c;
                            for ch in 0..c {
                                gx[xo + ch] += g[ch] * wv[wo + ch];
                                gw[wo + ch] += g[ch] * xv[xo + ch];
                            }
                        }
                    }
                }
                out.push((*x, gx));
                out.push((*w, gw));
                out.push((*b, gb));
            }
            Op::Conv3x3 { x, w, b } => {
                let (h, wd, ci) = self.value(*x).hwc()?;
                let co = self.shape(*b)[0];
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; co];
                for r in 0..h {
                    for col in 0..wd {
                        let g = &gy[(r * wd + col) * co..(r * wd + col + 1) * co];
                        for (o, v) in gb.iter_mut().zip(g) {
                            *o += v;
                        }
                        for (kr, kc, rr, cc) in taps(r, col, h, wd) {
                            let xo = (rr * wd + cc) * ci;
                            let wk = (kr * 3 + kc) * ci * co;
                            for i in 0..ci {
                                let wrow = &wv[wk + i * co..wk + (i + 1) * co];
                                gx[xo + i] += g.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                                let xi = xv[xo + i];
                                for (o, gv) in gw[wk + i * co..wk + (i + 1) * co].iter_mut().zip(g) {
                                    *o += xi * gv;
                                }
                            }
                        }
                    }
                }
                out.push((*x, gx));
                out.push((*w, gw));
                out.push((*b, gb));
            }
            Op::StridedConv { x, w, b, k } => {
                let k = *k;
                let (_, wd, ci) = self.value(*x).hwc()?;
                let (ho, wo, co) = node.value.hwc()?;
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; co];
                for r in 0..ho {
                    for col in 0..wo {
                        let g = &gy[(r * wo + col) * co..(r * wo + col + 1) * co];
                        for (o, v) in gb.iter_mut().zip(g) {
                            *o += v;
                        }
                        for kr in 0..k {
                            for kc in 0..k {
                                let xo = ((r * k + kr) * wd + col * k + kc) * ci;
                                let wk = (kr * k + kc) * ci * co;
                                for i in 0..ci {
                                    let wrow = &wv[wk + i * co..wk + (i + 1) * co];
                                    gx[xo + i] += g.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                                    let xi = xv[xo + i];
                                    for (o, gv) in gw[wk + i * co..wk + (i + 1) * co].iter_mut().zip(g) {
                                        *o += xi * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                out.push((*x, gx));
                out.push((*w, gw));
                out.push((*b, gb));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut g = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        g.extend_from_slice(&gy[base..base + len * inner]);
                    }
                    offset += len;
                    out.push((v, g));
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_at_axis(self.shape(*x), *axis);
                let taken = node.value.shape()[*axis];
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * taken * inner;
                    g[dst..dst + taken * inner].copy_from_slice(&gy[src..src + taken * inner]);
                }
                out.push((*x, g));
            }
            Op::Reshape(x) => out.push((*x, gy.to_vec())),
            Op::Gather { x, index } => {
                let src_shape = self.shape(*x);
                let row_len: usize = src_shape[1..].iter().product();
                let mut g = vec![0.0; src_shape[0] * row_len];
                for (j, &r) in index.iter().enumerate() {
                    for (o, v) in g[r * row_len..(r + 1) * row_len]
                        .iter_mut()
                        .zip(&gy[j * row_len..(j + 1) * row_len])
                    {
                        *o += v;
                    }
                }
                out.push((*x, g));
            }
            Op::UpsampleNearest { x, factor } => {
                let (_, w, c) = self.value(*x).hwc()?;
                let (ho, wo, _) = node.value.hwc()?;
                let mut g = vec![0.0; self.value(*x).numel()];
                for r in 0..ho {
                    for col in 0..wo {
                        let d = ((r / factor) * w + col / factor) * c;
                        let s = (r * wo + col) * c;
                        for ch in 0..c {
                            g[d + ch] += gy[s + ch];
                        }
                    }
                }
                out.push((*x, g));
            }
            Op::AvgPool { x, k } => {
                let (h, w, c) = self.value(*x).hwc()?;
                let wo = w / k;
                let norm = 1.0 / (k * k) as f64;
                let mut g = vec![0.0; h * w * c];
                for r in 0..h {
                    for col in 0..w {
                        let s = ((r / k) * wo + col / k) * c;
                        let d = (r * w + col) * c;
                        for ch in 0..c {
                            g[d + ch] = gy[s + ch] * norm;
                        }
                    }
                }
                out.push((*x, g));
            }
            Op::Sum(x) => out.push((*x, vec![gy[0]; self.value(*x).numel()])),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                out.push((*x, vec![gy[0] / n as f64; n]));
            }
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                d,
                mode,
                states,
            } => {
                let (l, d_ch) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dims = ScanDims {
                    len: l,
                    channels: d_ch,
                    state: self.shape(*a)[1],
                };
                let g = scan_backward(
                    val(*x),
                    val(*delta),
                    val(*a),
                    val(*b),
                    val(*c),
                    d.map(val),
                    dims,
                    *mode,
                    states,
                    gy,
                );
                out.push((*x, g.x));
                out.push((*delta, g.delta));
                out.push((*a, g.a));
                out.push((*b, g.b));
                out.push((*c, g.c));
                if let (Some(d), Some(gd)) = (d, g.d_skip) {
                    out.push((*d, gd));
                }
            }
            Op::Lovasz { probs, dprobs } => {
                out.push((*probs, dprobs.iter().map(|v| v * gy[0]).collect()));
            }
        }
        Ok(out)
    }
}

/// In-bounds taps of a zero-padded 3x3 window centred at `(r, c)`:
/// `(kernel_row, kernel_col, source_row, source_col)`.
fn taps(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> {
    (0..3usize).flat_map(move |kr| {
        (0..3usize).filter_map(move |kc| {
            let rr = (r + kr).checked_sub(1)?;
            let cc = (c + kc).checked_sub(1)?;
            (rr < h && cc < w).then_some((kr, kc, rr, cc))
        })
    })
}
