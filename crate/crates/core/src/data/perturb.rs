//! Test-time image degradations: Gaussian blur, additive Gaussian noise and
//! rescaling.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    /// Separable Gaussian blur with standard deviation `sigma` pixels.
    Blur { sigma: f64 },
    /// I.i.d. additive noise, clamped back to `[0, 1]`.
    Noise { sigma: f64 },
    /// Nearest-neighbour resize by `ratio`, then centre pad/crop to the
    /// original size.
    Scale { ratio: f64 },
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Perturbation::Blur { sigma } | Perturbation::Noise { sigma } => {
                sigma.is_finite() && sigma >= 0.0
            }
            Perturbation::Scale { ratio } => ratio.is_finite() && ratio > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid perturbation {self}")))
        }
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    /// `blur:<sigma>`, `noise:<sigma>` or `scale:<ratio>`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("perturbation {s:?} is not kind:value")))?;
        let v: f64 = value
            .parse()
            .map_err(|_| Error::Invalid(format!("perturbation value {value:?} is not a number")))?;
        let p = match kind {
            "blur" => Perturbation::Blur { sigma: v },
            "noise" => Perturbation::Noise { sigma: v },
            "scale" => Perturbation::Scale { ratio: v },
            other => return Err(Error::Invalid(format!("unknown perturbation {other:?}"))),
        };
        p.validate()?;
        Ok(p)
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Blur { sigma } => write!(f, "blur:{sigma}"),
            Perturbation::Noise { sigma } => write!(f, "noise:{sigma}"),
            Perturbation::Scale { ratio } => write!(f, "scale:{ratio}"),
        }
    }
}

/// Applies `p` to an `H x W x C` image. `seed` only affects noise.
pub fn perturb(img: &Tensor, p: &Perturbation, seed: u64) -> Result<Tensor> {
    p.validate()?;
    img.hwc()?;
    Ok(match *p {
        Perturbation::Blur { sigma } => gaussian_blur(img, sigma),
        Perturbation::Noise { sigma } => gaussian_noise(img, sigma, seed),
        Perturbation::Scale { ratio } => rescale(img, ratio),
    })
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    let (h, w, c) = img.hwc().expect("checked by caller");
    if sigma == 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    for r in 0..h {
        for col in 0..w {
            for (j, kv) in k.iter().enumerate() {
                let sc = reflect(col as isize + j as isize - radius, w);
                for ch in 0..c {
                    tmp[(r * w + col) * c + ch] += kv * src[(r * w + sc) * c + ch];
                }
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for (j, kv) in k.iter().enumerate() {
            let sr = reflect(r as isize + j as isize - radius, h);
            for col in 0..w {
                for ch in 0..c {
                    out[(r * w + col) * c + ch] += kv * tmp[(sr * w + col) * c + ch];
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], out).unwrap()
}

pub fn gaussian_noise(img: &Tensor, sigma: f64, seed: u64) -> Tensor {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    out
}

pub fn rescale(img: &Tensor, ratio: f64) -> Tensor {
    let (h, w, c) = img.hwc().expect("checked by caller");
    let hs = ((h as f64 * ratio).round() as usize).max(1);
    let ws = ((w as f64 * ratio).round() as usize).max(1);
    let src = img.data();
    let nearest = |i: usize, n_out: usize, n_in: usize| {
        (((i as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1)
    };
    // centre the resized image on the original canvas; uncovered pixels are 0
    let off_r = (h as isize - hs as isize) / 2;
    let off_c = (w as isize - ws as isize) / 2;
    let mut out = vec![0.0; h * w * c];
    for r in 0..h {
        let rs = r as isize - off_r;
        if rs < 0 || rs >= hs as isize {
            continue;
        }
        let sr = nearest(rs as usize, hs, h);
        for col in 0..w {
            let cs = col as isize - off_c;
            if cs < 0 || cs >= ws as isize {
                continue;
            }
            let sc = nearest(cs as usize, ws, w);
            let (d, s) = ((r * w + col) * c, (sr * w + sc) * c);
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Tensor::new(vec![h, w, c], out).unwrap()
}
