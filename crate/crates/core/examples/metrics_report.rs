//! Metric suites on hand-made maps, plus the damage-score arithmetic on a
//! published row (F1_loc 85.69, levels 89.11 / 53.11 / 72.44 / 80.79).

use stsmcd::metrics::{bda_scores, scd_confusion, BinaryConfusion, MetricReport};
use stsmcd::LabelMap;

fn main() -> stsmcd::Result<()> {
    let gt = LabelMap::new(2, 4, vec![1, 1, 0, 0, 1, 0, 0, 0])?;
    let pred = LabelMap::new(2, 4, vec![1, 0, 1, 0, 1, 0, 0, 0])?;
    let conf = BinaryConfusion::from_maps(&pred, &gt)?;
    println!("{conf:?}");
    let mut report = MetricReport::new();
    report.add_bcd(&conf.metrics()?);

    let change = LabelMap::new(2, 2, vec![1, 1, 0, 1])?;
    let t1 = LabelMap::new(2, 2, vec![1, 2, 0, 3])?;
    let t2 = LabelMap::new(2, 2, vec![2, 3, 0, 1])?;
    let p1 = LabelMap::new(2, 2, vec![1, 2, 0, 1])?;
    let p2 = LabelMap::new(2, 2, vec![2, 1, 0, 1])?;
    let q = scd_confusion(4, (&p1, &p2, &change), (&t1, &t2, &change))?;
    report.add_scd(&q.metrics()?);
    print!("{}", report.to_text());

    let (clf, overall) = bda_scores(0.8569, &[0.8911, 0.5311, 0.7244, 0.8079]);
    println!("F1_clf = {clf:.4}, F1_overall = {overall:.4} (published: 0.7114, 0.7550)");
    Ok(())
}
