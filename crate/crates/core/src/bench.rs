//! Quadratic self-attention foil and the sequence-length scaling benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ssm::{selective_scan_parallel, selective_scan_sequential, Discretization, SelectiveInputs};
use crate::tensor::Tensor;

/// Single-head query/key/value projections, each `D x D`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl AttentionParams {
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let b = 1.0 / (dim as f64).sqrt();
        Self {
            wq: Tensor::uniform(&[dim, dim], -b, b, rng),
            wk: Tensor::uniform(&[dim, dim], -b, b, rng),
            wv: Tensor::uniform(&[dim, dim], -b, b, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }
}

fn project(x: &[f64], len: usize, w: &Tensor) -> Vec<f64> {
    let d = w.shape()[0];
    let w = w.data();
    let mut out = vec![0.0; len * d];
    for t in 0..len {
        let row = &x[t * d..(t + 1) * d];
        let o = &mut out[t * d..(t + 1) * d];
        for (k, &xk) in row.iter().enumerate() {
            for (j, oj) in o.iter_mut().enumerate() {
                *oj += xk * w[k * d + j];
            }
        }
    }
    out
}

fn check(x: &Tensor, p: &AttentionParams) -> Result<(usize, usize)> {
    let d = p.dim();
    for w in [&p.wq, &p.wk, &p.wv] {
        if w.shape() != [d, d] {
            return Err(Error::Invalid(format!("projection of shape {:?}, expected {d}x{d}", w.shape())));
        }
    }
    match x.shape() {
        &[l, dx] if dx == d && l >= 1 => Ok((l, d)),
        s => Err(Error::Invalid(format!("attention input {s:?} for width {d}"))),
    }
}

/// Row-stochastic `L x L` weights `softmax(Q K^T / sqrt(D))`.
pub fn attention_weights(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (l, d) = check(x, p)?;
    let q = project(x.data(), l, &p.wq);
    let k = project(x.data(), l, &p.wk);
    let mut w = vec![0.0; l * l];
    let scale = 1.0 / (d as f64).sqrt();
    for i in 0..l {
        let row = &mut w[i * l..(i + 1) * l];
        let qi = &q[i * d..(i + 1) * d];
        for (j, r) in row.iter_mut().enumerate() {
            *r = qi.iter().zip(&k[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            z += *r;
        }
        for r in row.iter_mut() {
            *r /= z;
        }
    }
    Tensor::new(vec![l, l], w)
}

/// Global single-head self-attention, `L x D -> L x D`.
pub fn naive_attention(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (l, d) = check(x, p)?;
    let w = attention_weights(x, p)?;
    let v = project(x.data(), l, &p.wv);
    let w = w.data();
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        let o = &mut out[i * d..(i + 1) * d];
        for j in 0..l {
            let a = w[i * l + j];
            for (oc, vc) in o.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *oc += a * vc;
            }
        }
    }
    Tensor::new(vec![l, d], out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchOptions {
    pub channels: usize,
    pub state: usize,
    /// Timed repetitions per measurement; the fastest is reported.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            channels: 16,
            state: 16,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub scan_seq_ms: f64,
    pub scan_par_ms: f64,
    pub attn_ms: f64,
}

fn fastest_ms(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        f()?;
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}

/// Random selective-scan inputs with stable dynamics.
pub fn random_scan_inputs(len: usize, channels: usize, state: usize, seed: u64) -> (SelectiveInputs, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
    let si = SelectiveInputs {
        len,
        channels,
        state,
        x: draw(len * channels, -1.0, 1.0),
        delta: draw(len * channels, 1e-3, 0.1),
        b: draw(len * state, -1.0, 1.0),
        c: draw(len * state, -1.0, 1.0),
        d_skip: Some(vec![1.0; channels]),
    };
    let a = draw(channels * state, -2.0, -0.1);
    (si, a)
}

/// Times the sequential scan, the parallel scan and naive attention at each
/// length. Attention runs at width `channels`, like the scan.
pub fn run_bench(lengths: &[usize], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        if len == 0 {
            return Err(Error::Invalid("sequence length must be positive".into()));
        }
        let (si, a) = random_scan_inputs(len, opts.channels, opts.state, opts.seed);
        let mode = Discretization::default();
        let scan_seq_ms = fastest_ms(opts.repeats, || selective_scan_sequential(&si, &a, mode).map(drop))?;
        let scan_par_ms = fastest_ms(opts.repeats, || selective_scan_parallel(&si, &a, mode).map(drop))?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let params = AttentionParams::random(opts.channels, &mut rng);
        let x = Tensor::uniform(&[len, opts.channels], -1.0, 1.0, &mut rng);
        let attn_ms = fastest_ms(opts.repeats, || naive_attention(&x, &params).map(drop))?;
        rows.push(BenchRow {
            len,
            scan_seq_ms,
            scan_par_ms,
            attn_ms,
        });
    }
    Ok(rows)
}

pub const CSV_HEADER: &str = "L,scan_seq_ms,scan_par_ms,attn_ms";

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{},{:.4},{:.4},{:.4}", r.len, r.scan_seq_ms, r.scan_par_ms, r.attn_ms).unwrap();
    }
    s
}
