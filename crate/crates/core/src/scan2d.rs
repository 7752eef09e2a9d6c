//! Four-way cross-scan of 2D feature maps and the SS2D unit built on it.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Init, ParamId};
use crate::ssm::Discretization;
use crate::tensor::Tensor;

/// Traversal order of an `H x W` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Row-major from the top-left corner.
    RowMajor,
    /// Row-major from the bottom-right corner (reverse of `RowMajor`).
    RowMajorReversed,
    /// Column-major from the top-left corner, i.e. row-major over the transpose.
    ColumnMajor,
    /// Reverse of `ColumnMajor`, ending at the top-left corner.
    ColumnMajorReversed,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowMajor,
        Direction::RowMajorReversed,
        Direction::ColumnMajor,
        Direction::ColumnMajorReversed,
    ];

    /// Direction that reads a 180°-rotated grid in the same order as `self`
    /// reads the original.
    pub fn rotated_half_turn(self) -> Direction {
        match self {
            Direction::RowMajor => Direction::RowMajorReversed,
            Direction::RowMajorReversed => Direction::RowMajor,
            Direction::ColumnMajor => Direction::ColumnMajorReversed,
            Direction::ColumnMajorReversed => Direction::ColumnMajor,
        }
    }
}

/// Sequence order of one direction: `forward[k]` is the flat spatial index
/// read at step `k`, `inverse` undoes it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectionalLayout {
    pub direction: Direction,
    pub forward: Arc<[usize]>,
    pub inverse: Arc<[usize]>,
}

impl DirectionalLayout {
    pub fn new(direction: Direction, height: usize, width: usize) -> Self {
        let row_major = (0..height * width).collect::<Vec<_>>();
        let column_major = (0..width)
            .flat_map(|c| (0..height).map(move |r| r * width + c))
            .collect::<Vec<_>>();
        let forward: Vec<usize> = match direction {
            Direction::RowMajor => row_major,
            Direction::RowMajorReversed => row_major.into_iter().rev().collect(),
            Direction::ColumnMajor => column_major,
            Direction::ColumnMajorReversed => column_major.into_iter().rev().collect(),
        };
        let mut inverse = vec![0; forward.len()];
        for (k, &i) in forward.iter().enumerate() {
            inverse[i] = k;
        }
        Self {
            direction,
            forward: forward.into(),
            inverse: inverse.into(),
        }
    }

    pub fn all(height: usize, width: usize) -> [DirectionalLayout; 4] {
        Direction::ALL.map(|d| Self::new(d, height, width))
    }
}

/// Reads an `H x W x C` map in each of the four directions, giving four
/// `HW x C` sequences.
pub fn cross_scan_expand(feature: &Tensor) -> Result<[Tensor; 4]> {
    let (h, w, c) = feature.hwc()?;
    if h == 0 || w == 0 {
        return Err(Error::Invalid("cross-scan of an empty map".into()));
    }
    let data = feature.data();
    let layouts = DirectionalLayout::all(h, w);
    let mut out = Vec::with_capacity(4);
    for layout in &layouts {
        let mut seq = Vec::with_capacity(h * w * c);
        for &i in layout.forward.iter() {
            seq.extend_from_slice(&data[i * c..(i + 1) * c]);
        }
        out.push(Tensor::new(vec![h * w, c], seq)?);
    }
    Ok(out.try_into().expect("four directions"))
}

/// Scatters each sequence back through its inverse permutation and sums the
/// four maps in direction order.
pub fn cross_scan_merge(seqs: &[Tensor; 4], height: usize, width: usize) -> Result<Tensor> {
    let c = match seqs[0].shape() {
        &[l, c] if l == height * width => c,
        s => return Err(Error::Invalid(format!("sequence {s:?} for a {height}x{width} grid"))),
    };
    if seqs.iter().any(|s| s.shape() != [height * width, c]) {
        return Err(Error::Invalid("cross-scan sequences differ in shape".into()));
    }
    let mut out = vec![0.0; height * width * c];
    for (seq, layout) in seqs.iter().zip(DirectionalLayout::all(height, width).iter()) {
        let data = seq.data();
        for (k, &i) in layout.forward.iter().enumerate() {
            for ch in 0..c {
                out[i * c + ch] += data[k * c + ch];
            }
        }
    }
    Tensor::new(vec![height, width, c], out)
}

/// Selective-scan parameters owned by one direction.
#[derive(Clone, Debug)]
pub struct DirectionParams {
    /// `D x (D + 2N)`: time-scale pre-activation, then `B`, then `C`.
    pub x_proj: ParamId,
    pub dt_bias: ParamId,
    /// `D x N`; the state matrix is `-exp(a_log)`.
    pub a_log: ParamId,
    pub d_skip: Option<ParamId>,
}

/// Cross-scan followed by an independent selective scan per direction.
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub channels: usize,
    pub state: usize,
    pub mode: Discretization,
    pub directions: [DirectionParams; 4],
}

/// `softplus^{-1}(y) = y + ln(1 - e^{-y})`.
fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Ss2d {
    pub fn new(
        init: &mut Init,
        name: &str,
        channels: usize,
        state: usize,
        mode: Discretization,
        skip: bool,
    ) -> Self {
        let mut s = init.scope(name);
        let directions = [1, 2, 3, 4].map(|k| {
            let mut d = s.scope(&format!("dir{k}"));
            let x_proj = d.uniform(
                "x_proj",
                &[channels, channels + 2 * state],
                1.0 / (channels as f64).sqrt(),
            );
            let bias = (0..channels)
                .map(|_| inverse_softplus(d.random_range(1e-3, 0.1)))
                .collect();
            let dt_bias = d.tensor("dt_bias", Tensor::new(vec![channels], bias).unwrap());
            let a_log = d.tensor(
                "a_log",
                Tensor::from_fn(&[channels, state], |i| ((i % state) as f64 + 1.0).ln()),
            );
            let d_skip = skip.then(|| d.ones("d_skip", &[channels]));
            DirectionParams {
                x_proj,
                dt_bias,
                a_log,
                d_skip,
            }
        });
        Self {
            channels,
            state,
            mode,
            directions,
        }
    }

    /// `x: H x W x D` to `H x W x D`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (h, w, d) = g.value(x).hwc()?;
        if d != self.channels {
            return Err(Error::Shape {
                node: x.id(),
                msg: format!("SS2D expects {} channels, got {d}", self.channels),
            });
        }
        let n = self.state;
        let tokens = g.reshape(x, &[h * w, d])?;
        let mut merged = Vec::with_capacity(4);
        for (params, layout) in self.directions.iter().zip(DirectionalLayout::all(h, w)) {
            let seq = g.gather_rows(tokens, layout.forward.clone())?;
            let proj = g.matmul(seq, p[params.x_proj])?;
            let dt = g.slice(proj, 1, 0, d)?;
            let dt = g.add_bias(dt, p[params.dt_bias])?;
            let delta = g.softplus(dt)?;
            let b = g.slice(proj, 1, d, d + n)?;
            let c = g.slice(proj, 1, d + n, d + 2 * n)?;
            let a = g.exp(p[params.a_log])?;
            let a = g.scale(a, -1.0)?;
            let skip = params.d_skip.map(|id| p[id]);
            let y = g.selective_scan(seq, delta, a, b, c, skip, self.mode)?;
            merged.push(g.gather_rows(y, layout.inverse.clone())?);
        }
        let sum = g.add_all(&merged)?;
        g.reshape(sum, &[h, w, d])
    }
}
