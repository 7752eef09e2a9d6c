//! Finite-difference verification of reverse-mode gradients.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{FuseLevels, GateMode, StssBlock, VssBlock, VssConfig};
use crate::data::synth::{generate_sample, SynthConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, PrimitiveKind, Var};
use crate::label::LabelMap;
use crate::losses;
use crate::models::{Model, ModelConfig, Task};
use crate::nn::{Bound, Init, ParamStore};
use crate::scan2d::Ss2d;
use crate::ssm::Discretization;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// Coordinates checked; all of them when the leaves hold fewer.
    pub max_coords: usize,
    pub seed: u64,
}

impl GradCheckOptions {
    /// Settings for single primitives.
    pub const PRIMITIVE: GradCheckOptions = GradCheckOptions {
        step: 1e-5,
        tolerance: 1e-4,
        max_coords: 64,
        seed: 0,
    };

    /// Settings for blocks and whole models.
    pub const COMPOSITE: GradCheckOptions = GradCheckOptions {
        step: 1e-4,
        tolerance: 1e-3,
        max_coords: 64,
        seed: 0,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub enum CheckStatus {
    Passed,
    Failed,
    Skipped(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub coords: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub tolerance: f64,
    pub status: CheckStatus,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Passed
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.status {
            CheckStatus::Skipped(why) => write!(f, "{:<28} SKIP  {why}", self.name),
            status => write!(
                f,
                "{:<28} {}  coords={:<4} max_rel={:.3e} mean_rel={:.3e} tol={:.0e}",
                self.name,
                if *status == CheckStatus::Passed { "PASS" } else { "FAIL" },
                self.coords,
                self.max_rel,
                self.mean_rel,
                self.tolerance
            ),
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn evaluate<F>(leaves: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares the gradient of the scalar built by `build` from `leaves`
/// against central differences on a seeded sample of coordinates.
///
/// Graphs whose output depends on a non-differentiable node are reported as
/// skipped.
pub fn grad_check<F>(
    name: &str,
    leaves: &[Tensor],
    build: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Invalid(format!(
            "gradient check needs a scalar output, got shape {:?}",
            g.shape(out)
        )));
    }
    let mut report = GradCheckReport {
        name: name.to_string(),
        coords: 0,
        max_rel: 0.0,
        mean_rel: 0.0,
        tolerance: opts.tolerance,
        status: CheckStatus::Passed,
    };
    let blocked = g.non_differentiable_nodes();
    if let Some(&(node, kind)) = blocked.first() {
        report.status = CheckStatus::Skipped(format!(
            "non-differentiable node {node} ({}) on the path to the output",
            kind.name()
        ));
        return Ok(report);
    }
    g.backward(out, &Tensor::full(g.shape(out), 1.0))?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();

    let coords = sample_coords(leaves, opts.max_coords, opts.seed);
    let mut perturbed = leaves.to_vec();
    let mut total = 0.0;
    for &(leaf, idx) in &coords {
        let orig = leaves[leaf].data()[idx];
        perturbed[leaf].data_mut()[idx] = orig + opts.step;
        let plus = evaluate(&perturbed, &build)?;
        perturbed[leaf].data_mut()[idx] = orig - opts.step;
        let minus = evaluate(&perturbed, &build)?;
        perturbed[leaf].data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let rel = relative_error(analytic[leaf].data()[idx], numeric);
        report.max_rel = report.max_rel.max(rel);
        total += rel;
    }
    report.coords = coords.len();
    report.mean_rel = if coords.is_empty() { 0.0 } else { total / coords.len() as f64 };
    if !(report.max_rel <= opts.tolerance) {
        report.status = CheckStatus::Failed;
    }
    Ok(report)
}

/// All coordinates when they fit in `max`; otherwise `max` distinct ones,
/// each drawn by picking a tensor uniformly and then an entry within it.
fn sample_coords(leaves: &[Tensor], max: usize, seed: u64) -> Vec<(usize, usize)> {
    let total: usize = leaves.iter().map(Tensor::numel).sum();
    if total <= max {
        return leaves
            .iter()
            .enumerate()
            .flat_map(|(l, t)| (0..t.numel()).map(move |i| (l, i)))
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nonempty: Vec<usize> = (0..leaves.len()).filter(|&l| leaves[l].numel() > 0).collect();
    let mut picked = Vec::with_capacity(max);
    while picked.len() < max {
        let l = nonempty[rng.random_range(0..nonempty.len())];
        let i = rng.random_range(0..leaves[l].numel());
        if !picked.contains(&(l, i)) {
            picked.push((l, i));
        }
    }
    picked
}

/// Which checks [`run_suite`] performs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    Primitives,
    Blocks,
    Models,
    /// A single primitive or block by name (`matmul`, `vss_block`, ...).
    Named(String),
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Scope::All,
            "primitives" => Scope::Primitives,
            "blocks" => Scope::Blocks,
            "models" => Scope::Models,
            other if PrimitiveKind::from_name(other).is_some()
                || BLOCK_CHECKS.contains(&other)
                || MODEL_CHECKS.contains(&other) =>
            {
                Scope::Named(other.to_string())
            }
            other => return Err(Error::Invalid(format!("unknown gradcheck scope {other:?}"))),
        })
    }
}

pub const BLOCK_CHECKS: [&str; 6] = [
    "ss2d",
    "vss_block",
    "vss_block_multiply",
    "vss_block_exact_zoh",
    "stss_block",
    "fuse_levels",
];

pub const MODEL_CHECKS: [&str; 3] = ["mamba_bcd", "mamba_scd", "mamba_bda"];

/// Runs the checks selected by `scope`.
pub fn run_suite(scope: &Scope) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let wants = |name: &str, group: &Scope| match scope {
        Scope::All => true,
        Scope::Named(n) => n == name,
        s => s == group,
    };
    for kind in PrimitiveKind::ALL {
        if wants(kind.name(), &Scope::Primitives) {
            out.extend(check_primitive(kind)?);
        }
    }
    for name in BLOCK_CHECKS {
        if wants(name, &Scope::Blocks) {
            out.push(check_block(name)?);
        }
    }
    for name in MODEL_CHECKS {
        if wants(name, &Scope::Models) {
            out.push(check_model(name)?);
        }
    }
    Ok(out)
}

/// `sum(y ∘ r)` for a fixed random `r`, so every output entry carries a
/// distinct weight.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::uniform(g.shape(y), -1.0, 1.0, &mut rng);
    let r = g.constant(r);
    let m = g.mul(y, r)?;
    g.sum(m)
}

fn rand_t(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Values in `±[0.1, 1]`, away from the clamp threshold at 0.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Gradient checks of one primitive (the scan is checked in both modes) at
/// the primitive settings.
pub fn check_primitive(kind: PrimitiveKind) -> Result<Vec<GradCheckReport>> {
    check_primitive_with(kind, GradCheckOptions::PRIMITIVE)
}

pub fn check_primitive_with(kind: PrimitiveKind, opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ kind as u64);
    let mut cases: Vec<(String, Vec<Tensor>, Builder)> = Vec::new();
    let name = kind.name().to_string();
    let unary = |f: fn(&mut Graph, Var) -> Result<Var>| -> Builder {
        Box::new(move |g, v| {
            let y = f(g, v[0])?;
            weighted_sum(g, y, 1)
        })
    };
    use PrimitiveKind as K;
    match kind {
        K::Leaf => cases.push((name, vec![rand_t(&[8, 8], -1.0, 1.0, &mut rng)], Box::new(|g, v| weighted_sum(g, v[0], 1)))),
        K::MatMul => cases.push((
            name,
            vec![rand_t(&[6, 8], -1.0, 1.0, &mut rng), rand_t(&[8, 4], -1.0, 1.0, &mut rng)],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, 1)
            }),
        )),
        K::AddBias => cases.push((
            name,
            vec![rand_t(&[8, 8], -1.0, 1.0, &mut rng), rand_t(&[8], -1.0, 1.0, &mut rng)],
            Box::new(|g, v| {
                let y = g.add_bias(v[0], v[1])?;
                weighted_sum(g, y, 1)
            }),
        )),
        K::Add | K::Sub | K::Mul => {
            let op: fn(&mut Graph, Var, Var) -> Result<Var> = match kind {
                K::Add => Graph::add,
                K::Sub => Graph::sub,
                _ => Graph::mul,
            };
            cases.push((
                name,
                vec![rand_t(&[6, 6], -1.0, 1.0, &mut rng), rand_t(&[6, 6], -1.0, 1.0, &mut rng)],
                Box::new(move |g, v| {
                    let y = op(g, v[0], v[1])?;
                    weighted_sum(g, y, 1)
                }),
            ));
        }
        K::Scale => cases.push((
            name,
            vec![rand_t(&[8, 8], -1.0, 1.0, &mut rng)],
            Box::new(|g, v| {
                let y = g.scale(v[0], -1.7)?;
                weighted_sum(g, y, 1)
            }),
        )),
        K::Silu => cases.push((name, vec![rand_t(&[8, 8], -3.0, 3.0, &mut rng)], unary(Graph::silu))),
        K::Softplus => cases.push((name, vec![rand_t(&[8, 8], -3.0, 3.0, &mut rng)], unary(Graph::softplus))),
        K::Exp => cases.push((name, vec![rand_t(&[8, 8], -2.0, 2.0, &mut rng)], unary(Graph::exp))),
        K::Log => cases.push((name, vec![rand_t(&[8, 8], 0.5, 2.0, &mut rng)], unary(Graph::log))),
        K::Softmax => cases.push((name, vec![rand_t(&[8, 10], -2.0, 2.0, &mut rng)], unary(Graph::softmax))),
        K::ClampMin => cases.push((
            name,
            vec![away_from_zero(&[8, 8], &mut rng)],
            Box::new(|g, v| {
                let y = g.clamp_min(v[0], 0.0)?;
                weighted_sum(g, y, 1)
            }),
        )),
        K::LayerNorm => cases.push((
            name,
            vec![
                rand_t(&[10, 6], -2.0, 2.0, &mut rng),
                rand_t(&[6], 0.5, 1.5, &mut rng),
                rand_t(&[6], -0.5, 0.5, &mut rng),
            ],
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, 1)
            }),
        )),
        K::DepthwiseConv3x3 => cases.push((
            name,
            vec![
                rand_t(&[4, 4, 3], -1.0, 1.0, &mut rng),
                rand_t(&[3, 3, 3], -1.0, 1.0, &mut rng),
                rand_t(&[3], -1.0, 1.0, &mut rng),
            ],
            Box::new(|g, v| {
                let y = g.depthwise_conv3x3(v[0], v[1], v[2])?;
                weighted_sum(g, y, 1)
            }),
        )),
        K::Conv3x3 => cases.push((
            name,
            vec![
                rand_t(&[4, 4, 2], -1.0, 1.0, &mut rng),
                rand_t(&[3, 3, 2, 3], -1.0, 1.0, &mut rng),
                rand_t(&[3], -1.0, 1.0, &mut rng),
            ],
            Box::new(|g, v| {
                let y = g.conv3x3(v[0], v[1], v[2])?;
                weighted_sum(g, y, 1)
            }),
        )),
        K::StridedConv => cases.push((
            name,
            vec![
                rand_t(&[4, 4, 4], -1.0, 1.0, &mut rng),
                rand_t(&[2, 2, 4, 3], -1.0, 1.0, &mut rng),
                rand_t(&[3], -1.0, 1.0, &mut rng),
            ],
            Box::new(|g, v| {
                let y = g.strided_conv(v[0], v[1], v[2])?;
                weighted_sum(g, y, 1)
            }),
        )),
        K::Concat => cases.push((
            name,
            vec![rand_t(&[4, 6, 2], -1.0, 1.0, &mut rng), rand_t(&[4, 3, 2], -1.0, 1.0, &mut rng)],
            Box::new(|g, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                weighted_sum(g, y, 1)
            }),
        )),
        K::Slice => cases.push((
            name,
            vec![rand_t(&[6, 8, 2], -1.0, 1.0, &mut rng)],
            Box::new(|g, v| {
                let y = g.slice(v[0], 1, 1, 3)?;
                weighted_sum(g, y, 1)
            }),
        )),
        K::Reshape => cases.push((
            name,
            vec![rand_t(&[8, 8], -1.0, 1.0, &mut rng)],
            Box::new(|g, v| {
                let y = g.reshape(v[0], &[4, 16])?;
                weighted_sum(g, y, 1)
            }),
        )),
        K::Gather => cases.push((
            name,
            vec![rand_t(&[16, 5], -1.0, 1.0, &mut rng)],
            Box::new(|g, v| {
                let y = g.gather_rows(v[0], Arc::from(vec![3, 0, 0, 2, 15, 7, 7, 9, 1]))?;
                weighted_sum(g, y, 1)
            }),
        )),
        K::UpsampleNearest => cases.push((
            name,
            vec![rand_t(&[4, 5, 4], -1.0, 1.0, &mut rng)],
            Box::new(|g, v| {
                let y = g.upsample_nearest(v[0], 2)?;
                weighted_sum(g, y, 1)
            }),
        )),
        K::AvgPool => cases.push((
            name,
            vec![rand_t(&[6, 6, 2], -1.0, 1.0, &mut rng)],
            Box::new(|g, v| {
                let y = g.avg_pool(v[0], 2)?;
                weighted_sum(g, y, 1)
            }),
        )),
        K::Sum => cases.push((name, vec![rand_t(&[8, 8], -1.0, 1.0, &mut rng)], Box::new(|g, v| g.sum(v[0])))),
        K::Mean => cases.push((name, vec![rand_t(&[8, 8], -1.0, 1.0, &mut rng)], Box::new(|g, v| g.mean(v[0])))),
        K::SelectiveScan => {
            for mode in [Discretization::EulerB, Discretization::ExactZoh] {
                let (l, d, n) = (8, 2, 2);
                cases.push((
                    format!("{name}[{mode}]"),
                    vec![
                        rand_t(&[l, d], -1.0, 1.0, &mut rng),
                        rand_t(&[l, d], 0.05, 0.8, &mut rng),
                        rand_t(&[d, n], -1.5, -0.2, &mut rng),
                        rand_t(&[l, n], -1.0, 1.0, &mut rng),
                        rand_t(&[l, n], -1.0, 1.0, &mut rng),
                        rand_t(&[d], -1.0, 1.0, &mut rng),
                    ],
                    Box::new(move |g, v| {
                        let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], Some(v[5]), mode)?;
                        weighted_sum(g, y, 1)
                    }),
                ));
            }
        }
        K::LovaszSoftmax => {
            let labels: Vec<u8> = (0..24).map(|_| rng.random_range(0..3u8)).collect();
            cases.push((
                name,
                vec![rand_t(&[24, 3], -2.0, 2.0, &mut rng)],
                Box::new(move |g, v| {
                    let p = g.softmax(v[0])?;
                    g.lovasz_softmax(p, &labels, crate::label::IGNORE)
                }),
            ));
        }
        K::Argmax => cases.push((
            name,
            vec![rand_t(&[8, 8], -1.0, 1.0, &mut rng)],
            Box::new(|g, v| {
                let y = g.argmax(v[0])?;
                g.sum(y)
            }),
        )),
    }
    cases
        .into_iter()
        .map(|(name, leaves, build)| grad_check(&name, &leaves, build, opts))
        .collect()
}

/// Adds uniform noise to every parameter so that zero-initialized layers do
/// not hide gradient paths.
pub fn jitter_params(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Checks `loss(params, input)` with respect to the parameters and the input.
fn check_params<F>(name: &str, store: &ParamStore, inputs: Vec<Tensor>, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
{
    let n_params = store.len();
    let mut leaves = store.tensors().to_vec();
    leaves.extend(inputs);
    grad_check(
        name,
        &leaves,
        |g, vars| {
            let bound = Bound::from_vars(vars[..n_params].to_vec());
            loss(g, &bound, &vars[n_params..])
        },
        GradCheckOptions::COMPOSITE,
    )
}

pub fn check_block(name: &str) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (c, hw) = (4, 4);
    let mut cfg = VssConfig {
        state: 2,
        ..VssConfig::default()
    };
    let input = |rng: &mut ChaCha8Rng, ch: usize| Tensor::uniform(&[hw, hw, ch], -1.0, 1.0, rng);
    match name {
        "ss2d" => {
            let ss = Ss2d::new(&mut Init::new(&mut store, &mut rng), "ss2d", c, 2, cfg.mode, true);
            jitter_params(&mut store, 0.1, 1);
            let x = input(&mut rng, c);
            check_params(name, &store, vec![x], |g, p, v| {
                let y = ss.forward(g, p, v[0])?;
                weighted_sum(g, y, 2)
            })
        }
        "vss_block" | "vss_block_multiply" | "vss_block_exact_zoh" => {
            if name == "vss_block_multiply" {
                cfg.gate_mode = GateMode::Multiply;
            }
            if name == "vss_block_exact_zoh" {
                cfg.mode = Discretization::ExactZoh;
            }
            let block = VssBlock::new(&mut Init::new(&mut store, &mut rng), "vss", c, &cfg);
            jitter_params(&mut store, 0.1, 1);
            let x = input(&mut rng, c);
            check_params(name, &store, vec![x], |g, p, v| {
                let y = block.forward(g, p, v[0])?;
                weighted_sum(g, y, 2)
            })
        }
        "stss_block" => {
            let block = StssBlock::new(&mut Init::new(&mut store, &mut rng), "stss", c, &cfg);
            jitter_params(&mut store, 0.1, 1);
            let (x1, x2) = (input(&mut rng, c), input(&mut rng, c));
            check_params(name, &store, vec![x1, x2], |g, p, v| {
                let y = block.forward(g, p, v[0], v[1])?;
                weighted_sum(g, y, 2)
            })
        }
        "fuse_levels" => {
            let fuse = FuseLevels::new(&mut Init::new(&mut store, &mut rng), "fuse", c, 6);
            jitter_params(&mut store, 0.1, 1);
            let (hi, lo) = (input(&mut rng, c), input(&mut rng, 6));
            check_params(name, &store, vec![hi, lo], |g, p, v| {
                let y = fuse.forward(g, p, v[0], v[1])?;
                weighted_sum(g, y, 2)
            })
        }
        other => Err(Error::Invalid(format!("unknown block check {other:?}"))),
    }
}

/// Full Micro model through its composite loss on a 32x32 synthetic pair.
pub fn check_model(name: &str) -> Result<GradCheckReport> {
    let task = match name {
        "mamba_bcd" => Task::Bcd,
        "mamba_scd" => Task::Scd,
        "mamba_bda" => Task::Bda,
        other => return Err(Error::Invalid(format!("unknown model check {other:?}"))),
    };
    let mut model = Model::new(task, ModelConfig::micro(), 11);
    jitter_params(&mut model.store, 0.1, 3);
    let sample = generate_sample(&SynthConfig::new(task, 1, 32, 5), 0)?;
    let store = model.store.clone();
    check_params(name, &store, vec![sample.t1.clone(), sample.t2.clone()], |g, p, v| {
        let out = model.forward(g, p, v[0], v[1])?;
        model.loss(g, &out, &sample.labels)
    })
}

/// Loss-level check used by tests: cross-entropy plus Lovász on softmax
/// probabilities of random logits.
pub fn check_loss(labels: &LabelMap, classes: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::uniform(&[labels.height, labels.width, classes], -2.0, 2.0, &mut rng);
    grad_check(
        "ce_plus_lovasz",
        &[logits],
        |g, v| {
            let p = g.softmax(v[0])?;
            losses::ce_plus_lovasz(g, p, labels)
        },
        GradCheckOptions::COMPOSITE,
    )
}
