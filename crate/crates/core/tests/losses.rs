use stsmcd::losses::{bcd_loss, ce_plus_lovasz, cross_entropy, lovasz_softmax, lovasz_softmax_value, LOG_CLAMP};
use stsmcd::{Graph, LabelMap, Tensor, IGNORE};

fn probs(g: &mut Graph, rows: &[[f64; 2]]) -> stsmcd::Var {
    let data = rows.iter().flatten().copied().collect();
    g.leaf(Tensor::new(vec![rows.len(), 2], data).unwrap(), true)
}

#[test]
fn cross_entropy_value_and_ignore() {
    let mut g = Graph::new();
    let p = probs(&mut g, &[[0.8, 0.2], [0.4, 0.6], [0.5, 0.5]]);
    let y = LabelMap::new(1, 3, vec![0, 1, IGNORE]).unwrap();
    let ce = cross_entropy(&mut g, p, &y).unwrap();
    let want = -(0.8f64.ln() + 0.6f64.ln()) / 2.0;
    assert!((g.value(ce).data()[0] - want).abs() < 1e-14);
    g.backward(ce, &Tensor::scalar(1.0)).unwrap();
    let grad = g.grad(p).unwrap().data();
    assert_eq!(&grad[4..], &[0.0, 0.0]);
    assert!((grad[0] + 1.0 / (2.0 * 0.8)).abs() < 1e-12);
}

#[test]
fn cross_entropy_clamps_zero_probability() {
    let mut g = Graph::new();
    let p = probs(&mut g, &[[1.0, 0.0]]);
    let y = LabelMap::new(1, 1, vec![1]).unwrap();
    let ce = cross_entropy(&mut g, p, &y).unwrap();
    assert!((g.value(ce).data()[0] + LOG_CLAMP.ln()).abs() < 1e-9);
}

#[test]
fn lovasz_is_zero_for_perfect_and_one_for_inverted_prediction() {
    let labels = [0u8, 1, 1, 0];
    let perfect = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
    let wrong = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    assert!(lovasz_softmax_value(&perfect, 2, &labels).unwrap().abs() < 1e-15);
    assert!((lovasz_softmax_value(&wrong, 2, &labels).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn lovasz_ignores_masked_pixels_and_absent_classes() {
    // only class 1 is present; its error vector is [0.5] after masking
    let p = [0.5, 0.5, 0.0, 1.0];
    let v = lovasz_softmax_value(&p, 2, &[1, IGNORE]).unwrap();
    assert!((v - 0.5).abs() < 1e-15);
}

#[test]
fn graph_lovasz_agrees_with_value() {
    let rows = [[0.7, 0.3], [0.2, 0.8], [0.6, 0.4], [0.1, 0.9]];
    let y = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let mut g = Graph::new();
    let p = probs(&mut g, &rows);
    let l = lovasz_softmax(&mut g, p, &y).unwrap();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    assert!((g.value(l).data()[0] - lovasz_softmax_value(&flat, 2, &y.data).unwrap()).abs() < 1e-15);
}

#[test]
fn composite_loss_is_the_sum() {
    let rows = [[0.7, 0.3], [0.2, 0.8], [0.6, 0.4], [0.1, 0.9]];
    let y = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let mut g = Graph::new();
    let p = probs(&mut g, &rows);
    let ce = cross_entropy(&mut g, p, &y).unwrap();
    let lz = lovasz_softmax(&mut g, p, &y).unwrap();
    let both = ce_plus_lovasz(&mut g, p, &y).unwrap();
    let bcd = bcd_loss(&mut g, p, &y).unwrap();
    let want = g.value(ce).data()[0] + g.value(lz).data()[0];
    assert!((g.value(both).data()[0] - want).abs() < 1e-14);
    assert!((g.value(bcd).data()[0] - want).abs() < 1e-14);
}

#[test]
fn invalid_labels_are_rejected() {
    let mut g = Graph::new();
    let p = probs(&mut g, &[[0.5, 0.5]]);
    assert!(cross_entropy(&mut g, p, &LabelMap::new(1, 1, vec![2]).unwrap()).is_err());
    assert!(cross_entropy(&mut g, p, &LabelMap::new(1, 1, vec![IGNORE]).unwrap()).is_err());
    assert!(cross_entropy(&mut g, p, &LabelMap::new(1, 2, vec![0, 1]).unwrap()).is_err());
}
