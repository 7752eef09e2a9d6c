//! Label-preserving geometric augmentations: quarter-turn rotations and
//! left-right / top-bottom flips, applied identically to both epochs and
//! every label map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Labels, Sample};
use crate::label::LabelMap;
use crate::tensor::Tensor;

/// One draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    /// Clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
    pub flip_lr: bool,
    pub flip_ud: bool,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        quarter_turns: 0,
        flip_lr: false,
        flip_ud: false,
    };

    /// Uniform rotation; each flip with probability ½.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            quarter_turns: rng.random_range(0..4u8),
            flip_lr: rng.random_bool(0.5),
            flip_ud: rng.random_bool(0.5),
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::draw(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Output extent for an `h x w` input.
    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source pixel of output pixel `(r, c)`: rotate first, then flip.
    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        let (ho, wo) = self.out_dims(h, w);
        let r = if self.flip_ud { ho - 1 - r } else { r };
        let c = if self.flip_lr { wo - 1 - c } else { c };
        match self.quarter_turns % 4 {
            0 => (r, c),
            1 => (h - 1 - c, r),
            2 => (h - 1 - r, w - 1 - c),
            _ => (c, w - 1 - r),
        }
    }

    fn apply_grid<T: Copy>(&self, data: &[T], h: usize, w: usize, ch: usize) -> (Vec<T>, usize, usize) {
        let (ho, wo) = self.out_dims(h, w);
        let mut out = Vec::with_capacity(data.len());
        for r in 0..ho {
            for c in 0..wo {
                let (sr, sc) = self.source(r, c, h, w);
                let s = (sr * w + sc) * ch;
                out.extend_from_slice(&data[s..s + ch]);
            }
        }
        (out, ho, wo)
    }

    pub fn apply_image(&self, img: &Tensor) -> Tensor {
        let (h, w, c) = img.hwc().expect("images are H x W x C");
        let (data, ho, wo) = self.apply_grid(img.data(), h, w, c);
        Tensor::new(vec![ho, wo, c], data).unwrap()
    }

    pub fn apply_labels(&self, m: &LabelMap) -> LabelMap {
        let (data, ho, wo) = self.apply_grid(&m.data, m.height, m.width, 1);
        LabelMap::new(ho, wo, data).unwrap()
    }

    pub fn apply(&self, sample: &Sample) -> Sample {
        let l = |m: &LabelMap| self.apply_labels(m);
        let labels = match &sample.labels {
            Labels::Bcd { change } => Labels::Bcd { change: l(change) },
            Labels::Scd { t1, t2, change } => Labels::Scd {
                t1: l(t1),
                t2: l(t2),
                change: l(change),
            },
            Labels::Bda { loc, clf } => Labels::Bda {
                loc: l(loc),
                clf: l(clf),
            },
        };
        Sample {
            id: sample.id,
            t1: self.apply_image(&sample.t1),
            t2: self.apply_image(&sample.t2),
            labels,
        }
    }
}

/// Applies a random augmentation drawn from `seed`.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    Augmentation::from_seed(seed).apply(sample)
}
