//! Deterministic synthetic change-detection scenes.
//!
//! A scene is a softly textured neutral background with axis-aligned
//! rectangular objects snapped to a 4-pixel grid. The second epoch is derived
//! from the first by removing, inserting, relabelling or damaging objects,
//! and every label is read off that generative trace.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{save_dataset, Labels, Sample};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::models::Task;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub task: Task,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Land-cover classes for semantic change detection (excluding 0).
    pub semantic_classes: usize,
    /// Damage levels for damage assessment (excluding 0).
    pub damage_classes: usize,
}

impl SynthConfig {
    pub fn new(task: Task, count: usize, size: usize, seed: u64) -> Self {
        Self {
            task,
            count,
            height: size,
            width: size,
            seed,
            semantic_classes: 6,
            damage_classes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::Invalid(format!(
                "size {}x{} must be a positive multiple of 32",
                self.height, self.width
            )));
        }
        if self.count == 0 {
            return Err(Error::Invalid("count must be positive".into()));
        }
        if self.task == Task::Scd && !(2..=CLASS_COLORS.len()).contains(&self.semantic_classes) {
            return Err(Error::Invalid(format!(
                "semantic classes must be in 2..={}",
                CLASS_COLORS.len()
            )));
        }
        if self.task == Task::Bda && self.damage_classes != DAMAGE_COLORS.len() {
            return Err(Error::Invalid(format!(
                "damage assessment uses {} damage levels",
                DAMAGE_COLORS.len()
            )));
        }
        Ok(())
    }
}

/// Allowed fraction of changed (or, for damage assessment, building) pixels.
pub const TARGET_FRACTION: (f64, f64) = (0.05, 0.4);

const GRID: usize = 4;
const MIN_SIDE: usize = 8;
const MAX_SIDE: usize = 24;

const CLASS_COLORS: [[f64; 3]; 8] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.35, 0.90],
    [0.92, 0.85, 0.20],
    [0.80, 0.30, 0.85],
    [0.20, 0.85, 0.85],
    [0.95, 0.55, 0.15],
    [0.10, 0.10, 0.10],
];

const ROOF: [f64; 3] = [0.78, 0.55, 0.45];

/// Post-event appearance of a building per damage level.
const DAMAGE_COLORS: [[f64; 3]; 4] = [ROOF, [0.95, 0.88, 0.35], [0.45, 0.30, 0.60], [0.22, 0.16, 0.10]];

/// Per-sample RNG seed: a SplitMix64 hash of `(seed, id)`.
pub fn sample_seed(seed: u64, id: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(id as u64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    r0: usize,
    c0: usize,
    h: usize,
    w: usize,
}

impl Rect {
    /// True when the rectangles come closer than one grid cell.
    fn near(&self, o: &Rect) -> bool {
        self.r0 < o.r0 + o.h + GRID
            && o.r0 < self.r0 + self.h + GRID
            && self.c0 < o.c0 + o.w + GRID
            && o.c0 < self.c0 + self.w + GRID
    }

    fn pixels(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        (self.r0..self.r0 + self.h)
            .flat_map(move |r| (self.c0..self.c0 + self.w).map(move |c| r * width + c))
    }
}

struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn background(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let base = rng.random_range(0.40..0.50);
        let (fy, fx, phase) = (
            rng.random_range(0.1..0.4),
            rng.random_range(0.1..0.4),
            rng.random_range(0.0..std::f64::consts::TAU),
        );
        let mut data = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            for c in 0..w {
                let texture = 0.04 * (r as f64 * fy + c as f64 * fx + phase).sin();
                for _ in 0..3 {
                    data.push(base + texture + rng.random_range(-0.02..0.02));
                }
            }
        }
        Self { h, w, data }
    }

    /// Same scene content under a slightly different acquisition.
    fn reacquire(&self, rng: &mut ChaCha8Rng) -> Self {
        let shift = rng.random_range(-0.02..0.02);
        let data = self
            .data
            .iter()
            .map(|v| (v + shift + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0))
            .collect();
        Self {
            h: self.h,
            w: self.w,
            data,
        }
    }

    fn paint(&mut self, rect: &Rect, color: [f64; 3], rng: &mut ChaCha8Rng) {
        for i in rect.pixels(self.w).collect::<Vec<_>>() {
            for (ch, base) in color.iter().enumerate() {
                self.data[i * 3 + ch] = (base + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
            }
        }
    }

    fn into_tensor(self) -> Tensor {
        Tensor::new(vec![self.h, self.w, 3], self.data).expect("canvas dims")
    }
}

fn random_rect(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Rect {
    let side = |limit: usize, rng: &mut ChaCha8Rng| {
        let max = MAX_SIDE.min(limit) / GRID;
        rng.random_range(MIN_SIDE / GRID..=max) * GRID
    };
    let rh = side(h, rng);
    let rw = side(w, rng);
    Rect {
        r0: rng.random_range(0..=(h - rh) / GRID) * GRID,
        c0: rng.random_range(0..=(w - rw) / GRID) * GRID,
        h: rh,
        w: rw,
    }
}

/// Places up to `n` rectangles that keep a one-cell gap to `taken` and to
/// each other.
fn place(n: usize, h: usize, w: usize, taken: &mut Vec<Rect>, rng: &mut ChaCha8Rng) -> Vec<Rect> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        for _ in 0..200 {
            let r = random_rect(h, w, rng);
            if taken.iter().all(|t| !r.near(t)) {
                taken.push(r);
                out.push(r);
                break;
            }
        }
    }
    out
}

fn fraction(mask: &[u8]) -> f64 {
    mask.iter().filter(|&&v| v != 0).count() as f64 / mask.len() as f64
}

fn in_target(mask: &[u8]) -> bool {
    let f = fraction(mask);
    f >= TARGET_FRACTION.0 && f <= TARGET_FRACTION.1
}

/// Generates sample `id`; depends only on `(cfg, id)`.
pub fn generate_sample(cfg: &SynthConfig, id: usize) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, id));
    for _ in 0..10_000 {
        let attempt = match cfg.task {
            Task::Bcd => bcd_scene(cfg, id, &mut rng),
            Task::Scd => scd_scene(cfg, id, &mut rng),
            Task::Bda => bda_scene(cfg, id, &mut rng),
        };
        if let Some(sample) = attempt {
            return Ok(sample);
        }
    }
    Err(Error::Invalid(format!(
        "could not place objects on a {}x{} canvas",
        cfg.height, cfg.width
    )))
}

fn bcd_scene(cfg: &SynthConfig, id: usize, rng: &mut ChaCha8Rng) -> Option<Sample> {
    let (h, w) = (cfg.height, cfg.width);
    let mut taken = Vec::new();
    let n1 = rng.random_range(2..=4);
    let before = place(n1, h, w, &mut taken, rng);
    let colors: Vec<[f64; 3]> = before
        .iter()
        .map(|_| CLASS_COLORS[rng.random_range(0..6)])
        .collect();
    let removed: Vec<bool> = before.iter().map(|_| rng.random_bool(0.5)).collect();
    let n_new = rng.random_range(1..=2);
    let added = place(n_new, h, w, &mut taken, rng);

    let mut change = vec![0u8; h * w];
    for (rect, &gone) in before.iter().zip(&removed) {
        if gone {
            rect.pixels(w).for_each(|i| change[i] = 1);
        }
    }
    added.iter().for_each(|r| r.pixels(w).for_each(|i| change[i] = 1));
    if !in_target(&change) {
        return None;
    }

    let mut t1 = Canvas::background(h, w, rng);
    let mut t2 = t1.reacquire(rng);
    for ((rect, color), &gone) in before.iter().zip(&colors).zip(&removed) {
        t1.paint(rect, *color, rng);
        if !gone {
            t2.paint(rect, *color, rng);
        }
    }
    for rect in &added {
        t2.paint(rect, CLASS_COLORS[rng.random_range(0..6)], rng);
    }
    Some(Sample {
        id,
        t1: t1.into_tensor(),
        t2: t2.into_tensor(),
        labels: Labels::Bcd {
            change: LabelMap::new(h, w, change).ok()?,
        },
    })
}

fn scd_scene(cfg: &SynthConfig, id: usize, rng: &mut ChaCha8Rng) -> Option<Sample> {
    let (h, w, k) = (cfg.height, cfg.width, cfg.semantic_classes);
    let mut taken = Vec::new();
    let n = rng.random_range(3..=5);
    let objects = place(n, h, w, &mut taken, rng);
    let mut y1 = vec![0u8; h * w];
    let mut y2 = vec![0u8; h * w];
    let mut classes = Vec::with_capacity(objects.len());
    for rect in &objects {
        let from = rng.random_range(1..=k);
        let mut to = rng.random_range(1..k);
        if to >= from {
            to += 1;
        }
        classes.push((from, to));
        for i in rect.pixels(w) {
            y1[i] = from as u8;
            y2[i] = to as u8;
        }
    }
    let change: Vec<u8> = y1.iter().zip(&y2).map(|(a, b)| u8::from(a != b)).collect();
    if !in_target(&change) {
        return None;
    }
    let mut t1 = Canvas::background(h, w, rng);
    let mut t2 = t1.reacquire(rng);
    for (rect, &(from, to)) in objects.iter().zip(&classes) {
        t1.paint(rect, CLASS_COLORS[from - 1], rng);
        t2.paint(rect, CLASS_COLORS[to - 1], rng);
    }
    Some(Sample {
        id,
        t1: t1.into_tensor(),
        t2: t2.into_tensor(),
        labels: Labels::Scd {
            t1: LabelMap::new(h, w, y1).ok()?,
            t2: LabelMap::new(h, w, y2).ok()?,
            change: LabelMap::new(h, w, change).ok()?,
        },
    })
}

fn bda_scene(cfg: &SynthConfig, id: usize, rng: &mut ChaCha8Rng) -> Option<Sample> {
    let (h, w, levels) = (cfg.height, cfg.width, cfg.damage_classes);
    let mut taken = Vec::new();
    let n = rng.random_range(levels..=levels + 2);
    let buildings = place(n, h, w, &mut taken, rng);
    if buildings.len() < levels {
        return None;
    }
    // every level appears in every scene
    let offset = rng.random_range(0..levels);
    let damage: Vec<usize> = (0..buildings.len()).map(|i| (i + offset) % levels + 1).collect();
    let mut loc = vec![0u8; h * w];
    let mut clf = vec![0u8; h * w];
    for (rect, &d) in buildings.iter().zip(&damage) {
        for i in rect.pixels(w) {
            loc[i] = 1;
            clf[i] = d as u8;
        }
    }
    if !in_target(&loc) {
        return None;
    }
    let mut t1 = Canvas::background(h, w, rng);
    let mut t2 = t1.reacquire(rng);
    for (rect, &d) in buildings.iter().zip(&damage) {
        t1.paint(rect, ROOF, rng);
        t2.paint(rect, DAMAGE_COLORS[d - 1], rng);
    }
    Some(Sample {
        id,
        t1: t1.into_tensor(),
        t2: t2.into_tensor(),
        labels: Labels::Bda {
            loc: LabelMap::new(h, w, loc).ok()?,
            clf: LabelMap::new(h, w, clf).ok()?,
        },
    })
}

/// Generates `cfg.count` samples (in parallel, content independent of the
/// worker count).
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.count)
        .into_par_iter()
        .map(|id| generate_sample(cfg, id))
        .collect()
}

/// Generates a dataset and writes it to `dir`.
pub fn synth_generate(cfg: &SynthConfig, dir: &Path) -> Result<Vec<Sample>> {
    let samples = generate(cfg)?;
    save_dataset(dir, &samples)?;
    Ok(samples)
}
