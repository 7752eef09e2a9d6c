use stsmcd::gradcheck::{check_primitive, grad_check, CheckStatus, GradCheckOptions};
use stsmcd::graph::with_corrupted_backward;
use stsmcd::{Graph, PrimitiveKind, Tensor};

#[test]
fn matmul_backward_matches_hand_derivation() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
    let b = g.leaf(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap(), true);
    let y = g.matmul(a, b).unwrap();
    let s = g.sum(y).unwrap();
    assert_eq!(g.value(s).data(), &[17.0 + 39.0]);
    g.backward(s, &Tensor::scalar(1.0)).unwrap();
    // d/dA sum(A b) = 1 b^T, d/db = A^T 1
    assert_eq!(g.grad(a).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
    assert_eq!(g.grad(b).unwrap().data(), &[4.0, 6.0]);
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
    let y = g.scale(x, 3.0).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s, &Tensor::scalar(1.0)).unwrap();
    g.backward(s, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0, 6.0, 6.0]);
    g.zero_grad();
    g.backward(s, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0, 3.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[2], 1.0), true);
    let c = g.constant(Tensor::full(&[2], 2.0));
    let y = g.mul(x, c).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s, &Tensor::scalar(1.0)).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.matmul(a, b).is_err());
    assert!(g.backward(a, &Tensor::zeros(&[3])).is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 3], vec![1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0]).unwrap());
    let p = g.softmax(x).unwrap();
    for row in g.value(p).data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn composed_graph_passes_gradcheck() {
    let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.8, 2.0, -0.1, 0.5]).unwrap();
    let w = Tensor::new(vec![3, 2], vec![0.5, -0.4, 0.1, 0.9, -0.7, 0.2]).unwrap();
    let r = grad_check(
        "silu-softmax",
        &[x, w],
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.silu(y)?;
            let p = g.softmax(y)?;
            let l = g.log(p)?;
            g.mean(l)
        },
        GradCheckOptions::PRIMITIVE,
    )
    .unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn non_scalar_output_is_rejected() {
    let x = Tensor::full(&[3], 1.0);
    assert!(grad_check("vector", &[x], |g, v| g.exp(v[0]), GradCheckOptions::PRIMITIVE).is_err());
}

#[test]
fn corrupted_backward_is_caught_and_restored() {
    let bad = with_corrupted_backward(PrimitiveKind::Exp, || check_primitive(PrimitiveKind::Exp)).unwrap();
    assert!(bad.iter().any(|r| r.status == CheckStatus::Failed));
    let good = check_primitive(PrimitiveKind::Exp).unwrap();
    assert!(good.iter().all(|r| r.passed()));
}
