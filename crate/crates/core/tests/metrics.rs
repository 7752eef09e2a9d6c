use stsmcd::metrics::{bda_scores, harmonic_mean, scd_confusion, BdaConfusion, BinaryConfusion, MetricReport, SemanticConfusion};
use stsmcd::LabelMap;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn binary_metrics_by_hand() {
    let c = BinaryConfusion {
        tp: 30,
        fp: 10,
        fn_: 20,
        tn: 40,
    };
    let m = c.metrics().unwrap();
    assert!(close(m.precision, 0.75));
    assert!(close(m.recall, 0.6));
    assert!(close(m.oa, 0.7));
    assert!(close(m.f1, 2.0 * 0.75 * 0.6 / 1.35));
    assert!(close(m.iou, 0.5));
    let pe = (40.0 * 50.0 + 60.0 * 50.0) / 10_000.0;
    assert!(close(m.kappa, (0.7 - pe) / (1.0 - pe)));
}

#[test]
fn confusion_from_maps_skips_ignored() {
    let gt = LabelMap::new(1, 5, vec![1, 1, 0, 0, stsmcd::IGNORE]).unwrap();
    let pred = LabelMap::new(1, 5, vec![1, 0, 1, 0, 1]).unwrap();
    let c = BinaryConfusion::from_maps(&pred, &gt).unwrap();
    assert_eq!((c.tp, c.fn_, c.fp, c.tn), (1, 1, 1, 1));
    assert_eq!(c.total(), 4);
}

#[test]
fn perfect_semantic_prediction() {
    let change = LabelMap::new(1, 4, vec![1, 1, 0, 1]).unwrap();
    let t1 = LabelMap::new(1, 4, vec![1, 2, 0, 3]).unwrap();
    let t2 = LabelMap::new(1, 4, vec![2, 3, 0, 1]).unwrap();
    let q = scd_confusion(4, (&t1, &t2, &change), (&t1, &t2, &change)).unwrap();
    let m = q.metrics().unwrap();
    assert!(close(m.oa, 1.0));
    assert!(close(m.miou, 1.0));
    assert!(close(m.sek.unwrap(), 1.0));
}

#[test]
fn semantic_confusion_counts_and_bounds() {
    let mut q = SemanticConfusion::new(3);
    q.add(0, 0).unwrap();
    q.add(1, 2).unwrap();
    q.add(2, 2).unwrap();
    assert_eq!(q.get(1, 2), 1);
    assert!(q.add(3, 0).is_err());
    let m = q.metrics().unwrap();
    assert!(close(m.oa, 2.0 / 3.0));
    assert!(m.sek.unwrap() >= 0.0 && m.sek.unwrap() <= 1.0);
}

#[test]
fn all_no_change_sek_is_undefined() {
    let mut q = SemanticConfusion::new(3);
    q.add(0, 0).unwrap();
    assert!(q.metrics().unwrap().sek.is_err());
}

#[test]
fn damage_scores() {
    assert!(close(harmonic_mean(&[0.5, 0.5]), 0.5));
    assert_eq!(harmonic_mean(&[0.5, 0.0]), 0.0);
    let (clf, overall) = bda_scores(0.9, &[0.8, 0.8, 0.8, 0.8]);
    assert!(close(clf, 0.8));
    assert!(close(overall, 0.3 * 0.9 + 0.7 * 0.8));

    let gt_loc = LabelMap::new(1, 4, vec![0, 1, 1, 1]).unwrap();
    let gt_clf = LabelMap::new(1, 4, vec![0, 1, 2, 2]).unwrap();
    let mut c = BdaConfusion::new(2);
    c.accumulate(&gt_loc, &gt_clf, &gt_loc, &gt_clf).unwrap();
    let m = c.metrics();
    assert!(close(m.f1_loc, 1.0));
    assert!(close(m.f1_overall, 1.0));
}

#[test]
fn report_text_layout() {
    let mut r = MetricReport::new();
    r.push("bcd.f1", 0.5);
    r.push_undefined("scd.sek");
    assert_eq!(r.to_text(), "bcd.f1=0.500000\nscd.sek=undefined\n");
    assert_eq!(r.get("bcd.f1"), Some(0.5));
    assert_eq!(r.get("scd.sek"), None);
}
