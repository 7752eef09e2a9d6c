//! Siamese encoder, change and semantic decoders, and the three task models.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{FuseLevels, GateMode, PatchConv, StssBlock, VssBlock, VssConfig};
use crate::data::Labels;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::label::{LabelMap, IGNORE};
use crate::losses;
use crate::nn::{Bound, Init, LayerNorm, Linear, ParamStore};
use crate::ssm::Discretization;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Bcd,
    Scd,
    Bda,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bcd" => Ok(Self::Bcd),
            "scd" => Ok(Self::Scd),
            "bda" => Ok(Self::Bda),
            other => Err(Error::Invalid(format!("unknown task {other:?} (expected bcd, scd or bda)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bcd => "bcd",
            Self::Scd => "scd",
            Self::Bda => "bda",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Micro,
    Tiny,
    Small,
    Base,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "micro" => Ok(Self::Micro),
            "tiny" => Ok(Self::Tiny),
            "small" => Ok(Self::Small),
            "base" => Ok(Self::Base),
            other => Err(Error::Invalid(format!("unknown model variant {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Micro => "micro",
            Self::Tiny => "tiny",
            Self::Small => "small",
            Self::Base => "base",
        })
    }
}

/// Stage depths, widths and block hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub depths: [usize; 4],
    pub channels: [usize; 4],
    pub vss: VssConfig,
    /// Land-cover classes, excluding the no-change/background class.
    pub semantic_classes: usize,
    /// Damage levels, excluding the non-building class.
    pub damage_classes: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        let (depths, channels, state) = match variant {
            Variant::Micro => ([1, 1, 1, 1], [8, 16, 32, 64], 4),
            Variant::Tiny => ([2, 2, 4, 2], [96, 192, 384, 768], 16),
            Variant::Small => ([2, 2, 15, 2], [96, 192, 384, 768], 16),
            Variant::Base => ([2, 2, 15, 2], [128, 256, 512, 1024], 16),
        };
        Self {
            variant,
            depths,
            channels,
            vss: VssConfig {
                state,
                ..VssConfig::default()
            },
            semantic_classes: 6,
            damage_classes: 4,
        }
    }

    pub fn micro() -> Self {
        Self::new(Variant::Micro)
    }

    pub fn with_gate_mode(mut self, gate_mode: GateMode) -> Self {
        self.vss.gate_mode = gate_mode;
        self
    }

    pub fn with_discretization(mut self, mode: Discretization) -> Self {
        self.vss.mode = mode;
        self
    }

    /// `(H, W, C)` of the four encoder outputs for an `H x W` image.
    pub fn stage_shapes(&self, height: usize, width: usize) -> Result<[(usize, usize, usize); 4]> {
        check_divisible(height, width)?;
        Ok([0, 1, 2, 3].map(|j| (height >> (2 + j), width >> (2 + j), self.channels[j])))
    }
}

fn check_divisible(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0 {
        return Err(Error::Invalid(format!(
            "image size {height}x{width} must be a positive multiple of 32"
        )));
    }
    Ok(())
}

/// Fixed per-channel normalization applied to `[0, 1]` images before patch
/// embedding.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Four-stage hierarchical VSS encoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: PatchConv,
    pub embed_norm: LayerNorm,
    pub merges: Vec<PatchConv>,
    pub stages: Vec<Vec<VssBlock>>,
}

impl Encoder {
    pub fn new(init: &mut Init, name: &str, cfg: &ModelConfig) -> Self {
        let mut s = init.scope(name);
        let embed = PatchConv::patch_embed(&mut s, "patch_embed", 3, cfg.channels[0]);
        let embed_norm = LayerNorm::new(&mut s, "patch_embed_norm", cfg.channels[0]);
        let merges = (1..4)
            .map(|j| {
                PatchConv::patch_merge(
                    &mut s,
                    &format!("merge{}", j + 1),
                    cfg.channels[j - 1],
                    cfg.channels[j],
                )
            })
            .collect();
        let stages = (0..4)
            .map(|j| {
                (0..cfg.depths[j])
                    .map(|b| {
                        VssBlock::new(
                            &mut s,
                            &format!("stage{}.block{b}", j + 1),
                            cfg.channels[j],
                            &cfg.vss,
                        )
                    })
                    .collect()
            })
            .collect();
        Self {
            embed,
            embed_norm,
            merges,
            stages,
        }
    }

    /// `image: H x W x 3` with `H, W` multiples of 32.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<[Var; 4]> {
        let (h, w, c) = g.value(image).hwc()?;
        check_divisible(h, w)?;
        if c != 3 {
            return Err(Error::Invalid(format!("expected 3 image channels, got {c}")));
        }
        let shift = g.constant(Tensor::full(&[3], -INPUT_MEAN));
        let centred = g.add_bias(image, shift)?;
        let normalized = g.scale(centred, 1.0 / INPUT_STD)?;
        let mut feats = Vec::with_capacity(4);
        let x = self.embed.forward(g, p, normalized)?;
        let (h4, w4, c0) = g.value(x).hwc()?;
        let tokens = g.reshape(x, &[h4 * w4, c0])?;
        let tokens = self.embed_norm.forward(g, p, tokens)?;
        let mut x = g.reshape(tokens, &[h4, w4, c0])?;
        for (j, blocks) in self.stages.iter().enumerate() {
            if j > 0 {
                x = self.merges[j - 1].forward(g, p, x)?;
            }
            for block in blocks {
                x = block.forward(g, p, x)?;
            }
            feats.push(x);
        }
        Ok(feats.try_into().expect("four stages"))
    }
}

/// 1x1 classification head over a feature map, followed by `x4` upsampling.
fn head_and_upsample(g: &mut Graph, p: &Bound, head: &Linear, x: Var) -> Result<Var> {
    let logits = head.forward_map(g, p, x)?;
    g.upsample_nearest(logits, 4)
}

/// STSS at every level, deepest first, each fused with the upsampled
/// output of the level below it.
#[derive(Clone, Debug)]
pub struct ChangeDecoder {
    pub stss: Vec<StssBlock>,
    pub fuse: Vec<FuseLevels>,
    pub head: Linear,
    pub classes: usize,
}

impl ChangeDecoder {
    pub fn new(init: &mut Init, name: &str, cfg: &ModelConfig, classes: usize) -> Self {
        let mut s = init.scope(name);
        let stss = (0..4)
            .map(|j| StssBlock::new(&mut s, &format!("stss{}", j + 1), cfg.channels[j], &cfg.vss))
            .collect();
        let fuse = (0..3)
            .map(|j| {
                FuseLevels::new(
                    &mut s,
                    &format!("fuse{}", j + 1),
                    cfg.channels[j],
                    cfg.channels[j + 1],
                )
            })
            .collect();
        let head = Linear::new(&mut s, "head", cfg.channels[0], classes, true);
        Self {
            stss,
            fuse,
            head,
            classes,
        }
    }

    /// Logits at input resolution, `H x W x classes`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, f1: &[Var; 4], f2: &[Var; 4]) -> Result<Var> {
        let mut prior: Option<Var> = None;
        for j in (0..4).rev() {
            let mut s = self.stss[j].forward(g, p, f1[j], f2[j])?;
            if let Some(up) = prior {
                s = self.fuse[j].forward(g, p, s, up)?;
            }
            if j == 0 {
                return head_and_upsample(g, p, &self.head, s);
            }
            prior = Some(g.upsample_nearest(s, 2)?);
        }
        unreachable!("the loop returns at the shallowest level")
    }
}

/// Single-epoch decoder: VSS at the deepest level, then upsample, fuse with
/// the next shallower encoder level and apply another VSS block.
#[derive(Clone, Debug)]
pub struct SemanticDecoder {
    pub blocks: Vec<VssBlock>,
    pub fuse: Vec<FuseLevels>,
    pub head: Linear,
    pub classes: usize,
}

impl SemanticDecoder {
    pub fn new(init: &mut Init, name: &str, cfg: &ModelConfig, classes: usize) -> Self {
        let mut s = init.scope(name);
        let blocks = (0..4)
            .map(|j| VssBlock::new(&mut s, &format!("vss{}", j + 1), cfg.channels[j], &cfg.vss))
            .collect();
        let fuse = (0..3)
            .map(|j| {
                FuseLevels::new(
                    &mut s,
                    &format!("fuse{}", j + 1),
                    cfg.channels[j],
                    cfg.channels[j + 1],
                )
            })
            .collect();
        let head = Linear::new(&mut s, "head", cfg.channels[0], classes, true);
        Self {
            blocks,
            fuse,
            head,
            classes,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, feats: &[Var; 4]) -> Result<Var> {
        let mut x = self.blocks[3].forward(g, p, feats[3])?;
        for j in (0..3).rev() {
            let up = g.upsample_nearest(x, 2)?;
            let fused = self.fuse[j].forward(g, p, feats[j], up)?;
            x = self.blocks[j].forward(g, p, fused)?;
        }
        head_and_upsample(g, p, &self.head, x)
    }
}

/// Task-specific decoders.
#[derive(Clone, Debug)]
pub enum Heads {
    Bcd {
        change: ChangeDecoder,
    },
    Scd {
        change: ChangeDecoder,
        t1: SemanticDecoder,
        t2: SemanticDecoder,
    },
    Bda {
        loc: SemanticDecoder,
        clf: ChangeDecoder,
    },
}

/// Per-pixel class probabilities (`H x W x K`) produced by a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Outputs {
    Bcd { change: Var },
    Scd { t1: Var, t2: Var, change: Var },
    Bda { loc: Var, clf: Var },
}

/// Hard per-pixel predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    Bcd {
        change: LabelMap,
    },
    Scd {
        t1: LabelMap,
        t2: LabelMap,
        change: LabelMap,
    },
    Bda {
        loc: LabelMap,
        clf: LabelMap,
    },
}

impl Prediction {
    /// `(name, map)` pairs in a fixed order.
    pub fn maps(&self) -> Vec<(&'static str, &LabelMap)> {
        match self {
            Prediction::Bcd { change } => vec![("bcd", change)],
            Prediction::Scd { t1, t2, change } => vec![("t1", t1), ("t2", t2), ("bcd", change)],
            Prediction::Bda { loc, clf } => vec![("loc", loc), ("clf", clf)],
        }
    }
}

/// A task model together with its parameters. Both epochs pass through the
/// same encoder parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub task: Task,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub heads: Heads,
}

impl Model {
    pub fn new(task: Task, config: ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let encoder = Encoder::new(&mut init, "encoder", &config);
        let heads = match task {
            Task::Bcd => Heads::Bcd {
                change: ChangeDecoder::new(&mut init, "change_decoder", &config, 2),
            },
            Task::Scd => Heads::Scd {
                change: ChangeDecoder::new(&mut init, "change_decoder", &config, 2),
                t1: SemanticDecoder::new(&mut init, "semantic_t1", &config, config.semantic_classes + 1),
                t2: SemanticDecoder::new(&mut init, "semantic_t2", &config, config.semantic_classes + 1),
            },
            Task::Bda => Heads::Bda {
                loc: SemanticDecoder::new(&mut init, "loc_decoder", &config, 2),
                clf: ChangeDecoder::new(&mut init, "clf_decoder", &config, config.damage_classes + 1),
            },
        };
        Self {
            task,
            config,
            store,
            encoder,
            heads,
        }
    }

    pub fn encode(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<[Var; 4]> {
        self.encoder.forward(g, p, image)
    }

    /// Logits of every head.
    pub fn logits(&self, g: &mut Graph, p: &Bound, x1: Var, x2: Var) -> Result<Outputs> {
        let f1 = self.encode(g, p, x1)?;
        Ok(match &self.heads {
            Heads::Bcd { change } => {
                let f2 = self.encode(g, p, x2)?;
                Outputs::Bcd {
                    change: change.forward(g, p, &f1, &f2)?,
                }
            }
            Heads::Scd { change, t1, t2 } => {
                let f2 = self.encode(g, p, x2)?;
                Outputs::Scd {
                    t1: t1.forward(g, p, &f1)?,
                    t2: t2.forward(g, p, &f2)?,
                    change: change.forward(g, p, &f1, &f2)?,
                }
            }
            Heads::Bda { loc, clf } => {
                let loc = loc.forward(g, p, &f1)?;
                let f2 = self.encode(g, p, x2)?;
                Outputs::Bda {
                    loc,
                    clf: clf.forward(g, p, &f1, &f2)?,
                }
            }
        })
    }

    /// Class probabilities of every head.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x1: Var, x2: Var) -> Result<Outputs> {
        Ok(match self.logits(g, p, x1, x2)? {
            Outputs::Bcd { change } => Outputs::Bcd {
                change: g.softmax(change)?,
            },
            Outputs::Scd { t1, t2, change } => Outputs::Scd {
                t1: g.softmax(t1)?,
                t2: g.softmax(t2)?,
                change: g.softmax(change)?,
            },
            Outputs::Bda { loc, clf } => Outputs::Bda {
                loc: g.softmax(loc)?,
                clf: g.softmax(clf)?,
            },
        })
    }

    /// Composite task loss of probabilities returned by [`Model::forward`].
    pub fn loss(&self, g: &mut Graph, out: &Outputs, labels: &Labels) -> Result<Var> {
        match (out, labels) {
            (Outputs::Bcd { change }, Labels::Bcd { change: y }) => losses::bcd_loss(g, *change, y),
            (Outputs::Scd { t1, t2, change }, Labels::Scd { t1: y1, t2: y2, change: yc }) => {
                losses::scd_loss(g, *t1, *t2, *change, y1, y2, yc)
            }
            (Outputs::Bda { loc, clf }, Labels::Bda { loc: yl, clf: yc }) => {
                losses::bda_loss(g, *loc, *clf, yl, yc)
            }
            _ => Err(Error::Invalid(format!(
                "labels of another task given to a {} model",
                self.task
            ))),
        }
    }

    /// Argmax predictions for one image pair.
    pub fn predict(&self, x1: &Tensor, x2: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let a = g.constant(x1.clone());
        let b = g.constant(x2.clone());
        let out = self.logits(&mut g, &p, a, b)?;
        let hard = |g: &Graph, v: Var| LabelMap::argmax(g.value(v));
        Ok(match out {
            Outputs::Bcd { change } => Prediction::Bcd {
                change: hard(&g, change)?,
            },
            Outputs::Scd { t1, t2, change } => Prediction::Scd {
                t1: hard(&g, t1)?,
                t2: hard(&g, t2)?,
                change: hard(&g, change)?,
            },
            Outputs::Bda { loc, clf } => Prediction::Bda {
                loc: hard(&g, loc)?,
                clf: hard(&g, clf)?,
            },
        })
    }
}

/// Keeps the land-cover predictions only where change was detected; every
/// other pixel becomes [`IGNORE`].
pub fn semantic_change_mask(
    t1: &LabelMap,
    t2: &LabelMap,
    change: &LabelMap,
) -> Result<(LabelMap, LabelMap)> {
    if !t1.same_dims(t2) || !t1.same_dims(change) {
        return Err(Error::Invalid("semantic change maps differ in size".into()));
    }
    let mask = |m: &LabelMap| {
        let data = m
            .data
            .iter()
            .zip(&change.data)
            .map(|(&v, &c)| if c == 0 { IGNORE } else { v })
            .collect();
        LabelMap::new(m.height, m.width, data)
    };
    Ok((mask(t1)?, mask(t2)?))
}

/// "From-to" counts: entry `[a][b]` counts pixels labelled `a` in the first
/// map and `b` in the second. Ignored or out-of-range pixels are skipped.
pub fn transition_matrix(t1: &LabelMap, t2: &LabelMap, classes: usize) -> Result<Vec<Vec<u64>>> {
    if !t1.same_dims(t2) {
        return Err(Error::Invalid("transition maps differ in size".into()));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&a, &b) in t1.data.iter().zip(&t2.data) {
        let (a, b) = (a as usize, b as usize);
        if a < classes && b < classes {
            m[a][b] += 1;
        }
    }
    Ok(m)
}
