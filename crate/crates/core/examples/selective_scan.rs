//! Selective scan basics: discretize a continuous system, check that the
//! recurrent and convolutional views agree, then run an input-dependent scan
//! both sequentially and as a parallel prefix scan.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stsmcd::ssm::{
    lti_conv_apply, lti_conv_kernel, lti_recurrent_scan, selective_scan_parallel, selective_scan_sequential,
    ContinuousSsm, Discretization, SelectiveInputs,
};

fn main() -> stsmcd::Result<()> {
    let ssm = ContinuousSsm::new(vec![-0.5, -1.0, -2.0], vec![1.0, 0.5, 0.25], vec![0.3, -0.2, 0.7])?;
    let d = ssm.discretize(0.1)?;
    println!("A_bar = {:?}", d.a_bar);
    println!("B_bar = {:?}", d.b_bar);

    let x: Vec<f64> = (0..16).map(|t| (t as f64 * 0.4).sin()).collect();
    let rec = lti_recurrent_scan(&d, &ssm.c, &x)?;
    let conv = lti_conv_apply(&lti_conv_kernel(&d, &ssm.c, x.len())?, &x)?;
    let gap = rec.iter().zip(&conv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("recurrent vs convolution, max gap {gap:.2e}");

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (len, channels, state) = (1024, 4, 8);
    let mut draw = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
    let si = SelectiveInputs {
        len,
        channels,
        state,
        x: draw(len * channels, -1.0, 1.0),
        delta: draw(len * channels, 0.001, 0.1),
        b: draw(len * state, -1.0, 1.0),
        c: draw(len * state, -1.0, 1.0),
        d_skip: Some(vec![1.0; channels]),
    };
    let a = draw(channels * state, -2.0, -0.1);
    for mode in [Discretization::EulerB, Discretization::ExactZoh] {
        let seq = selective_scan_sequential(&si, &a, mode)?;
        let par = selective_scan_parallel(&si, &a, mode)?;
        let gap = seq.iter().zip(&par).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("{mode}: sequential vs parallel over L={len}, max gap {gap:.2e}");
    }
    Ok(())
}
