//! State-space mathematics: zero-order-hold discretization, the LTI recurrence
//! and its convolution-kernel dual, and the input-dependent (selective) scan in
//! sequential and parallel-prefix forms.
//!
//! All systems here use a real diagonal state matrix, so every state lane
//! evolves independently and the scan is elementwise.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// How the input projection is discretized inside a selective scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Discretization {
    /// `B̄ = (ΔA)⁻¹(exp(ΔA) − 1)ΔB`.
    ExactZoh,
    /// `B̄ = ΔB`.
    #[default]
    EulerB,
}

impl std::str::FromStr for Discretization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_zoh" | "zoh" => Ok(Self::ExactZoh),
            "euler_b" | "euler" => Ok(Self::EulerB),
            other => Err(Error::Invalid(format!("unknown discretization `{other}`"))),
        }
    }
}

impl std::fmt::Display for Discretization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ExactZoh => "exact_zoh",
            Self::EulerB => "euler_b",
        })
    }
}

const SERIES_CUTOFF: f64 = 1e-3;

/// `(exp(δa) − 1) / a`, continuous through `a = 0` where it equals `δ`.
pub fn zoh_factor(a: f64, delta: f64) -> f64 {
    let z = delta * a;
    if z.abs() < SERIES_CUTOFF {
        delta * (1.0 + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z / 120.0))))
    } else {
        z.exp_m1() / a
    }
}

/// Partial derivatives of [`zoh_factor`] with respect to `a` and `delta`.
pub(crate) fn zoh_factor_partials(a: f64, delta: f64) -> (f64, f64) {
    let z = delta * a;
    let d_delta = z.exp();
    let d_a = if z.abs() < SERIES_CUTOFF {
        delta * delta * (0.5 + z * (1.0 / 3.0 + z * (0.125 + z * (1.0 / 30.0 + z / 144.0))))
    } else {
        (z * z.exp() - z.exp_m1()) / (a * a)
    };
    (d_a, d_delta)
}

/// Zero-order-hold discretization of one diagonal entry.
pub fn zoh_discretize(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Domain(format!("time scale must be positive, got {delta}")));
    }
    Ok(((delta * a).exp(), zoh_factor(a, delta) * b))
}

/// Single-input single-output continuous system with a diagonal state matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSsm {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Per-step transition and input projection of a discretized diagonal system.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

impl ContinuousSsm {
    pub fn new(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() || a.len() != c.len() {
            return Err(Error::Invalid(format!(
                "state sizes disagree: a={}, b={}, c={}",
                a.len(),
                b.len(),
                c.len()
            )));
        }
        Ok(Self { a, b, c })
    }

    pub fn state_size(&self) -> usize {
        self.a.len()
    }

    pub fn discretize(&self, delta: f64) -> Result<DiscreteSsm> {
        let mut a_bar = Vec::with_capacity(self.a.len());
        let mut b_bar = Vec::with_capacity(self.a.len());
        for (&a, &b) in self.a.iter().zip(&self.b) {
            let (ab, bb) = zoh_discretize(a, b, delta)?;
            a_bar.push(ab);
            b_bar.push(bb);
        }
        Ok(DiscreteSsm { a_bar, b_bar })
    }
}

/// `h_t = Ā h_{t−1} + B̄ x_t`, `y_t = C h_t`, starting from `h_0 = 0`.
pub fn lti_recurrent_scan(dssm: &DiscreteSsm, c: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Invalid("cannot scan an empty sequence".into()));
    }
    check_lti(dssm, c)?;
    let mut h = vec![0.0; c.len()];
    let mut y = Vec::with_capacity(x.len());
    for &xt in x {
        let mut acc = 0.0;
        for n in 0..h.len() {
            h[n] = dssm.a_bar[n] * h[n] + dssm.b_bar[n] * xt;
            acc += c[n] * h[n];
        }
        y.push(acc);
    }
    Ok(y)
}

/// The structured kernel `K[k] = C Ā^k B̄` for `k < len`.
pub fn lti_conv_kernel(dssm: &DiscreteSsm, c: &[f64], len: usize) -> Result<Vec<f64>> {
    if len < 1 {
        return Err(Error::Invalid("kernel length must be at least 1".into()));
    }
    check_lti(dssm, c)?;
    let mut power: Vec<f64> = dssm.b_bar.clone();
    let mut kernel = Vec::with_capacity(len);
    for _ in 0..len {
        kernel.push(c.iter().zip(&power).map(|(ci, pi)| ci * pi).sum());
        for (p, a) in power.iter_mut().zip(&dssm.a_bar) {
            *p *= a;
        }
    }
    Ok(kernel)
}

/// Causal convolution `y_t = Σ_{k≤t} K[k] x[t−k]`.
pub fn lti_conv_apply(kernel: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if kernel.len() != x.len() {
        return Err(Error::Invalid(format!(
            "kernel length {} does not match sequence length {}",
            kernel.len(),
            x.len()
        )));
    }
    Ok((0..x.len())
        .map(|t| (0..=t).map(|k| kernel[k] * x[t - k]).sum())
        .collect())
}

fn check_lti(dssm: &DiscreteSsm, c: &[f64]) -> Result<()> {
    if dssm.a_bar.len() != c.len() || dssm.b_bar.len() != c.len() || c.is_empty() {
        return Err(Error::Invalid(format!(
            "state sizes disagree: a_bar={}, b_bar={}, c={}",
            dssm.a_bar.len(),
            dssm.b_bar.len(),
            c.len()
        )));
    }
    Ok(())
}

/// Per-step inputs of a selective scan. Sequences are row-major: `x` and
/// `delta` are `len x channels`, `b` and `c` are `len x state`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveInputs {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d_skip: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl SelectiveInputs {
    fn dims(&self) -> ScanDims {
        ScanDims {
            len: self.len,
            channels: self.channels,
            state: self.state,
        }
    }

    /// Checks buffer sizes against `a` (`channels x state`) and positivity of `delta`.
    pub fn validate(&self, a: &[f64]) -> Result<()> {
        let (l, d, n) = (self.len, self.channels, self.state);
        if l < 1 {
            return Err(Error::Invalid("selective scan needs at least one step".into()));
        }
        let sizes_ok = self.x.len() == l * d
            && self.delta.len() == l * d
            && self.b.len() == l * n
            && self.c.len() == l * n
            && a.len() == d * n
            && self.d_skip.as_ref().is_none_or(|s| s.len() == d);
        if !sizes_ok {
            return Err(Error::Invalid(format!(
                "selective scan buffers inconsistent with L={l}, D={d}, N={n}"
            )));
        }
        if let Some(bad) = self.delta.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("time scale must be positive, got {bad}")));
        }
        Ok(())
    }
}

#[inline]
fn input_gain(mode: Discretization, a: f64, delta: f64, b: f64) -> f64 {
    match mode {
        Discretization::EulerB => delta * b,
        Discretization::ExactZoh => zoh_factor(a, delta) * b,
    }
}

/// Reference recurrence: one pass over time, state lanes updated in place.
pub fn selective_scan_sequential(
    si: &SelectiveInputs,
    a: &[f64],
    mode: Discretization,
) -> Result<Vec<f64>> {
    si.validate(a)?;
    Ok(scan_forward(
        &si.x,
        &si.delta,
        a,
        &si.b,
        &si.c,
        si.d_skip.as_deref(),
        si.dims(),
        mode,
        None,
    ))
}

/// The same scan evaluated as an associative prefix scan over
/// `(Ā_t, B̄_t x_t)` pairs, one work-efficient tree per state lane.
/// Channels are distributed over the rayon pool; the per-lane combine order
/// is fixed, so results do not depend on the worker count.
pub fn selective_scan_parallel(
    si: &SelectiveInputs,
    a: &[f64],
    mode: Discretization,
) -> Result<Vec<f64>> {
    si.validate(a)?;
    let (l, d_ch, n_st) = (si.len, si.channels, si.state);
    let columns: Vec<Vec<f64>> = (0..d_ch)
        .into_par_iter()
        .map(|d| {
            let mut y = vec![0.0; l];
            let mut lane = Vec::with_capacity(l);
            for n in 0..n_st {
                let a_dn = a[d * n_st + n];
                lane.clear();
                lane.extend((0..l).map(|t| {
                    let delta = si.delta[t * d_ch + d];
                    let gain = input_gain(mode, a_dn, delta, si.b[t * n_st + n]);
                    ((delta * a_dn).exp(), gain * si.x[t * d_ch + d])
                }));
                inclusive_scan(&mut lane, LinearRecurrence::IDENTITY, LinearRecurrence::combine);
                for (t, &(_, h)) in lane.iter().enumerate() {
                    y[t] += si.c[t * n_st + n] * h;
                }
            }
            if let Some(skip) = &si.d_skip {
                for (t, yt) in y.iter_mut().enumerate() {
                    *yt += skip[d] * si.x[t * d_ch + d];
                }
            }
            y
        })
        .collect();
    let mut out = vec![0.0; l * d_ch];
    for (d, col) in columns.iter().enumerate() {
        for (t, v) in col.iter().enumerate() {
            out[t * d_ch + d] = *v;
        }
    }
    Ok(out)
}

/// Composition of affine maps `h ↦ a h + b`.
pub struct LinearRecurrence;

impl LinearRecurrence {
    pub const IDENTITY: (f64, f64) = (1.0, 0.0);

    /// Applies `first` then `second`.
    #[inline]
    pub fn combine(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
        (second.0 * first.0, second.0 * first.1 + second.1)
    }
}

/// In-place inclusive Blelloch scan (up-sweep then down-sweep) for an
/// associative, not necessarily commutative, `combine(earlier, later)`.
pub fn inclusive_scan<T: Copy>(xs: &mut Vec<T>, identity: T, combine: impl Fn(T, T) -> T) {
    let len = xs.len();
    if len <= 1 {
        return;
    }
    let original: Vec<T> = xs.clone();
    let m = len.next_power_of_two();
    xs.resize(m, identity);

    let mut stride = 1;
    while stride < m {
        let mut i = 2 * stride - 1;
        while i < m {
            xs[i] = combine(xs[i - stride], xs[i]);
            i += 2 * stride;
        }
        stride *= 2;
    }

    xs[m - 1] = identity;
    stride = m / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < m {
            let left = xs[i - stride];
            xs[i - stride] = xs[i];
            xs[i] = combine(xs[i], left);
            i += 2 * stride;
        }
        stride /= 2;
    }

    xs.truncate(len);
    for (prefix, item) in xs.iter_mut().zip(original) {
        *prefix = combine(*prefix, item);
    }
}

/// Forward recurrence shared with the autodiff primitive. When `states` is
/// given it receives every post-update hidden state, laid out `L x D x N`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward(
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d_skip: Option<&[f64]>,
    dims: ScanDims,
    mode: Discretization,
    mut states: Option<&mut Vec<f64>>,
) -> Vec<f64> {
    let ScanDims {
        len: l,
        channels: d_ch,
        state: n_st,
    } = dims;
    let mut h = vec![0.0; d_ch * n_st];
    let mut y = vec![0.0; l * d_ch];
    if let Some(s) = states.as_deref_mut() {
        s.clear();
        s.reserve(l * d_ch * n_st);
    }
    for t in 0..l {
        let bt = &b[t * n_st..(t + 1) * n_st];
        let ct = &c[t * n_st..(t + 1) * n_st];
        for d in 0..d_ch {
            let xt = x[t * d_ch + d];
            let dt = delta[t * d_ch + d];
            let hd = &mut h[d * n_st..(d + 1) * n_st];
            let ad = &a[d * n_st..(d + 1) * n_st];
            let mut acc = 0.0;
            for n in 0..n_st {
                let decay = (dt * ad[n]).exp();
                hd[n] = decay * hd[n] + input_gain(mode, ad[n], dt, bt[n]) * xt;
                acc += ct[n] * hd[n];
            }
            if let Some(skip) = d_skip {
                acc += skip[d] * xt;
            }
            y[t * d_ch + d] = acc;
        }
        if let Some(s) = states.as_deref_mut() {
            s.extend_from_slice(&h);
        }
    }
    y
}

pub(crate) struct ScanGrads {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d_skip: Option<Vec<f64>>,
}

/// Reverse-time adjoint of [`scan_forward`] given the stored states.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward(
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d_skip: Option<&[f64]>,
    dims: ScanDims,
    mode: Discretization,
    states: &[f64],
    gy: &[f64],
) -> ScanGrads {
    let ScanDims {
        len: l,
        channels: d_ch,
        state: n_st,
    } = dims;
    let mut g = ScanGrads {
        x: vec![0.0; l * d_ch],
        delta: vec![0.0; l * d_ch],
        a: vec![0.0; d_ch * n_st],
        b: vec![0.0; l * n_st],
        c: vec![0.0; l * n_st],
        d_skip: d_skip.map(|_| vec![0.0; d_ch]),
    };
    let mut carry = vec![0.0; d_ch * n_st];
    let zeros = vec![0.0; d_ch * n_st];
    for t in (0..l).rev() {
        let h_t = &states[t * d_ch * n_st..(t + 1) * d_ch * n_st];
        let h_prev = if t == 0 {
            &zeros[..]
        } else {
            &states[(t - 1) * d_ch * n_st..t * d_ch * n_st]
        };
        for d in 0..d_ch {
            let ix = t * d_ch + d;
            let (xt, dt, gyt) = (x[ix], delta[ix], gy[ix]);
            if let (Some(skip), Some(gs)) = (d_skip, g.d_skip.as_mut()) {
                g.x[ix] += gyt * skip[d];
                gs[d] += gyt * xt;
            }
            for n in 0..n_st {
                let j = d * n_st + n;
                let (a_dn, b_tn, c_tn) = (a[j], b[t * n_st + n], c[t * n_st + n]);
                g.c[t * n_st + n] += gyt * h_t[j];
                let gh = gyt * c_tn + carry[j];
                let decay = (dt * a_dn).exp();
                // h_t = decay * h_prev + gain * x
                let g_decay = gh * h_prev[j];
                g.delta[ix] += g_decay * decay * a_dn;
                g.a[j] += g_decay * decay * dt;
                carry[j] = gh * decay;
                let g_gain = gh * xt;
                match mode {
                    Discretization::EulerB => {
                        g.x[ix] += gh * dt * b_tn;
                        g.delta[ix] += g_gain * b_tn;
                        g.b[t * n_st + n] += g_gain * dt;
                    }
                    Discretization::ExactZoh => {
                        let phi = zoh_factor(a_dn, dt);
                        let (dphi_da, dphi_dd) = zoh_factor_partials(a_dn, dt);
                        g.x[ix] += gh * phi * b_tn;
                        g.b[t * n_st + n] += g_gain * phi;
                        g.delta[ix] += g_gain * b_tn * dphi_dd;
                        g.a[j] += g_gain * b_tn * dphi_da;
                    }
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zoh_scalar_values() {
        let (ab, bb) = zoh_discretize(-1.0, 1.0, 0.1).unwrap();
        // exp(-0.1) and 1 - exp(-0.1) evaluated to 7 places
        assert!(close(ab, 0.904_837_4, 5e-8));
        assert!(close(bb, 0.095_162_6, 5e-8));
        let (ab, bb) = zoh_discretize(0.0, 1.0, 0.1).unwrap();
        assert_eq!(ab, 1.0);
        assert!(close(bb, 0.1, 1e-15));
    }

    #[test]
    fn zoh_rejects_non_positive_delta() {
        assert!(matches!(zoh_discretize(-1.0, 1.0, 0.0), Err(Error::Domain(_))));
        assert!(zoh_discretize(-1.0, 1.0, -0.5).is_err());
        let (ab, bb) = zoh_discretize(-1.0, 1.0, 1e-300).unwrap();
        assert_eq!(ab, 1.0);
        assert!(bb < 1e-299);
    }

    #[test]
    fn zoh_factor_is_smooth_across_cutoff() {
        for &a in &[-1e-2, -9.99e-3, -1.001e-2] {
            let direct = (0.1f64 * a).exp_m1() / a;
            assert!(close(zoh_factor(a, 0.1), direct, 1e-15));
        }
        // finite-difference check of the partials on both branches
        for &(a, dt) in &[(-0.003, 0.2), (-2.0, 0.3), (-1e-5, 0.05)] {
            let (da, dd) = zoh_factor_partials(a, dt);
            let h = 1e-6;
            let na = (zoh_factor(a + h, dt) - zoh_factor(a - h, dt)) / (2.0 * h);
            let nd = (zoh_factor(a, dt + h) - zoh_factor(a, dt - h)) / (2.0 * h);
            assert!(close(da, na, 1e-8), "{da} {na}");
            assert!(close(dd, nd, 1e-8), "{dd} {nd}");
        }
    }

    #[test]
    fn lti_examples() {
        let memoryless = DiscreteSsm {
            a_bar: vec![0.0],
            b_bar: vec![1.0],
        };
        assert_eq!(lti_recurrent_scan(&memoryless, &[1.0], &[5.0, 7.0]).unwrap(), vec![5.0, 7.0]);
        let integrator = DiscreteSsm {
            a_bar: vec![1.0],
            b_bar: vec![1.0],
        };
        assert_eq!(
            lti_recurrent_scan(&integrator, &[1.0], &[1.0, 1.0, 1.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(lti_conv_kernel(&integrator, &[1.0], 4).unwrap(), vec![1.0; 4]);
        let half = DiscreteSsm {
            a_bar: vec![0.5],
            b_bar: vec![1.0],
        };
        assert_eq!(lti_conv_kernel(&half, &[1.0], 3).unwrap(), vec![1.0, 0.5, 0.25]);
        assert_eq!(
            lti_conv_kernel(&memoryless, &[2.0], 3).unwrap(),
            vec![2.0, 0.0, 0.0]
        );
        assert!(lti_recurrent_scan(&half, &[1.0], &[]).is_err());
        assert!(lti_conv_kernel(&half, &[1.0], 0).is_err());
    }

    #[test]
    fn conv_apply_examples() {
        let (a, b, c) = (1.5, -2.0, 0.25);
        assert_eq!(lti_conv_apply(&[1.0, 0.0, 0.0], &[a, b, c]).unwrap(), vec![a, b, c]);
        assert_eq!(
            lti_conv_apply(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert!(lti_conv_apply(&[1.0, 1.0], &[1.0]).is_err());
    }

    fn random_inputs(rng: &mut ChaCha8Rng, l: usize, d: usize, n: usize) -> (SelectiveInputs, Vec<f64>) {
        let si = SelectiveInputs {
            len: l,
            channels: d,
            state: n,
            x: (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            delta: (0..l * d).map(|_| rng.random_range(0.01..0.5)).collect(),
            b: (0..l * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            c: (0..l * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            d_skip: Some((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()),
        };
        let a = (0..d * n).map(|_| -rng.random_range(0.1..2.0)).collect();
        (si, a)
    }

    #[test]
    fn selective_scan_reduces_to_lti() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (l, n) = (16, 3);
        let sys = ContinuousSsm::new(
            (0..n).map(|_| -rng.random_range(0.1..2.0)).collect(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let delta = 0.2;
        let x: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let si = SelectiveInputs {
            len: l,
            channels: 1,
            state: n,
            x: x.clone(),
            delta: vec![delta; l],
            b: (0..l).flat_map(|_| sys.b.clone()).collect(),
            c: (0..l).flat_map(|_| sys.c.clone()).collect(),
            d_skip: None,
        };
        let want = lti_recurrent_scan(&sys.discretize(delta).unwrap(), &sys.c, &x).unwrap();
        let got = selective_scan_sequential(&si, &sys.a, Discretization::ExactZoh).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!(close(*g, *w, 1e-10));
        }
    }

    #[test]
    fn euler_vanishing_delta_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut si, a) = random_inputs(&mut rng, 6, 2, 2);
        si.delta = vec![1e-300; 12];
        si.d_skip = None;
        let y = selective_scan_sequential(&si, &a, Discretization::EulerB).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-290));
    }

    #[test]
    fn single_step_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (si, a) = random_inputs(&mut rng, 1, 2, 3);
        for mode in [Discretization::EulerB, Discretization::ExactZoh] {
            let y = selective_scan_sequential(&si, &a, mode).unwrap();
            for d in 0..2 {
                let dt = si.delta[d];
                let dot: f64 = (0..3)
                    .map(|n| si.c[n] * input_gain(mode, a[d * 3 + n], dt, si.b[n]))
                    .sum();
                let want = dot * si.x[d] + si.d_skip.as_ref().unwrap()[d] * si.x[d];
                assert!(close(y[d], want, 1e-15));
            }
            let p = selective_scan_parallel(&si, &a, mode).unwrap();
            assert_eq!(p, y);
        }
    }

    #[test]
    fn parallel_cumulative_sum() {
        // a = 0 with Euler gain and unit Δ, B, C gives a running sum
        let l = 5;
        let si = SelectiveInputs {
            len: l,
            channels: 1,
            state: 1,
            x: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            delta: vec![1.0; l],
            b: vec![1.0; l],
            c: vec![1.0; l],
            d_skip: None,
        };
        let y = selective_scan_parallel(&si, &[0.0], Discretization::EulerB).unwrap();
        assert_eq!(y, vec![1.0, 3.0, 6.0, 10.0, 15.0]);
    }

    #[test]
    fn parallel_matches_sequential_long() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (si, a) = random_inputs(&mut rng, 1024, 4, 4);
        for mode in [Discretization::EulerB, Discretization::ExactZoh] {
            let s = selective_scan_sequential(&si, &a, mode).unwrap();
            let p = selective_scan_parallel(&si, &a, mode).unwrap();
            let diff = s.iter().zip(&p).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-9, "{diff}");
        }
    }

    #[test]
    fn scan_rejects_bad_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut si, a) = random_inputs(&mut rng, 3, 1, 1);
        si.delta[1] = 0.0;
        assert!(matches!(
            selective_scan_sequential(&si, &a, Discretization::EulerB),
            Err(Error::Domain(_))
        ));
        assert!(selective_scan_parallel(&si, &a, Discretization::EulerB).is_err());
    }

    #[test]
    fn blelloch_matches_serial_prefix() {
        // affine maps modulo a prime: associative, non-commutative, exact
        const P: u64 = 1_000_003;
        let combine = |f: (u64, u64), g: (u64, u64)| (g.0 * f.0 % P, (g.0 * f.1 + g.1) % P);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for len in 0..70 {
            let items: Vec<(u64, u64)> =
                (0..len).map(|_| (rng.random_range(0..P), rng.random_range(0..P))).collect();
            let mut xs = items.clone();
            inclusive_scan(&mut xs, (1, 0), combine);
            let mut acc = (1, 0);
            for (i, &it) in items.iter().enumerate() {
                acc = combine(acc, it);
                assert_eq!(xs[i], acc, "len {len} index {i}");
            }
        }
    }
}
