//! Confusion-matrix based metrics for binary change detection, semantic
//! change detection and building damage assessment.
//!
//! Ratios whose denominator is zero evaluate to 0.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE};

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn check_dims(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "maps of {}x{} and {}x{} cannot be compared",
            a.height, a.width, b.height, b.width
        )))
    }
}

/// Pixel counts of a two-class comparison with class 1 as positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BinaryConfusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BcdMetrics {
    pub recall: f64,
    pub precision: f64,
    pub oa: f64,
    pub f1: f64,
    pub iou: f64,
    pub kappa: f64,
}

impl BinaryConfusion {
    pub fn add(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Accumulates a prediction against ground truth; nonzero means positive
    /// and ground-truth [`IGNORE`] pixels are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        check_dims(pred, gt)?;
        for (&p, &t) in pred.data.iter().zip(&gt.data) {
            if t != IGNORE {
                self.add(t != 0, p != 0);
            }
        }
        Ok(())
    }

    pub fn from_maps(pred: &LabelMap, gt: &LabelMap) -> Result<Self> {
        let mut c = Self::default();
        c.accumulate(pred, gt)?;
        Ok(c)
    }

    pub fn merge(&mut self, other: &BinaryConfusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn f1(&self) -> f64 {
        let tp = self.tp as f64;
        ratio(2.0 * tp, 2.0 * tp + self.fp as f64 + self.fn_ as f64)
    }

    pub fn metrics(&self) -> Result<BcdMetrics> {
        let n = self.total() as f64;
        if n == 0.0 {
            return Err(Error::UndefinedMetric("bcd: no evaluated pixels"));
        }
        let (tp, fp, fn_, tn) = (self.tp as f64, self.fp as f64, self.fn_ as f64, self.tn as f64);
        let recall = ratio(tp, tp + fn_);
        let precision = ratio(tp, tp + fp);
        let oa = (tp + tn) / n;
        let pe = ((tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn)) / (n * n);
        Ok(BcdMetrics {
            recall,
            precision,
            oa,
            f1: ratio(2.0 * precision * recall, precision + recall),
            iou: ratio(tp, tp + fp + fn_),
            kappa: ratio(oa - pe, 1.0 - pe),
        })
    }
}

/// `(K+1) x (K+1)` counts, rows ground truth, columns prediction; index 0 is
/// "no change".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticConfusion {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScdMetrics {
    pub oa: f64,
    pub f1: f64,
    pub miou: f64,
    pub iou_nc: f64,
    pub iou_c: f64,
    /// `Err` when every count is in the no-change cell.
    pub sek: std::result::Result<f64, &'static str>,
}

impl SemanticConfusion {
    /// `classes` counts the no-change class.
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Invalid(format!(
                "class pair ({truth}, {pred}) outside {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    /// Adds a masked prediction against a masked ground truth; masked
    /// ([`IGNORE`]) pixels count as no-change.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        check_dims(pred, gt)?;
        let unmask = |v: u8| if v == IGNORE { 0 } else { v as usize };
        for (&p, &t) in pred.data.iter().zip(&gt.data) {
            self.add(unmask(t), unmask(p))?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SemanticConfusion) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Invalid("merging confusions of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    fn col(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    pub fn metrics(&self) -> Result<ScdMetrics> {
        let k = self.classes;
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return Err(Error::UndefinedMetric("scd: empty confusion matrix"));
        }
        let total = total as f64;
        let q00 = self.get(0, 0) as f64;
        let diag: f64 = (0..k).map(|i| self.get(i, i) as f64).sum();
        let changed_diag = diag - q00;

        let oa = diag / total;
        let iou_nc = ratio(q00, (self.row(0) + self.col(0)) as f64 - q00);
        let iou_c = ratio(changed_diag, total - q00);

        let pred_changed: f64 = (1..k).map(|j| self.col(j) as f64).sum();
        let gt_changed: f64 = (1..k).map(|i| self.row(i) as f64).sum();
        let precision = ratio(changed_diag, pred_changed);
        let recall = ratio(changed_diag, gt_changed);

        // kappa on the matrix with the no-change/no-change cell removed
        let hat_total = total - q00;
        let sek = if hat_total == 0.0 {
            Err("scd.sek undefined: no changed pixels in prediction or ground truth")
        } else {
            let hat_row = |i: usize| self.row(i) as f64 - if i == 0 { q00 } else { 0.0 };
            let hat_col = |j: usize| self.col(j) as f64 - if j == 0 { q00 } else { 0.0 };
            let rho = changed_diag / hat_total;
            let eta = (0..k).map(|i| hat_row(i) * hat_col(i)).sum::<f64>() / (hat_total * hat_total);
            let kappa = if 1.0 - eta == 0.0 {
                if rho == 1.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (rho - eta) / (1.0 - eta)
            };
            Ok((iou_c - 1.0).exp() * kappa)
        };

        Ok(ScdMetrics {
            oa,
            f1: ratio(2.0 * precision * recall, precision + recall),
            miou: (iou_nc + iou_c) / 2.0,
            iou_nc,
            iou_c,
            sek,
        })
    }
}

/// Semantic change confusion of predicted `(t1, t2, change)` maps against
/// ground truth. Land-cover maps are masked by their change map first; both
/// epochs contribute.
pub fn scd_confusion(
    classes: usize,
    pred: (&LabelMap, &LabelMap, &LabelMap),
    gt: (&LabelMap, &LabelMap, &LabelMap),
) -> Result<SemanticConfusion> {
    let (p1, p2) = crate::models::semantic_change_mask(pred.0, pred.1, pred.2)?;
    let (g1, g2) = crate::models::semantic_change_mask(gt.0, gt.1, gt.2)?;
    let mut q = SemanticConfusion::new(classes);
    q.accumulate(&p1, &g1)?;
    q.accumulate(&p2, &g2)?;
    Ok(q)
}

/// Harmonic mean of per-level F1 scores; 0 if any level scores 0.
pub fn harmonic_mean(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

/// `(F1_clf, F1_overall)` from the localization F1 and per-level F1 scores.
pub fn bda_scores(f1_loc: f64, level_f1: &[f64]) -> (f64, f64) {
    let clf = harmonic_mean(level_f1);
    (clf, 0.3 * f1_loc + 0.7 * clf)
}

/// Localization confusion and one-vs-rest confusions per damage level.
/// Damage levels are scored on ground-truth building pixels only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BdaConfusion {
    pub loc: BinaryConfusion,
    pub levels: Vec<BinaryConfusion>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BdaMetrics {
    pub f1_loc: f64,
    pub f1_levels: Vec<f64>,
    pub f1_clf: f64,
    pub f1_overall: f64,
}

impl BdaConfusion {
    pub fn new(levels: usize) -> Self {
        Self {
            loc: BinaryConfusion::default(),
            levels: vec![BinaryConfusion::default(); levels],
        }
    }

    pub fn accumulate(
        &mut self,
        pred_loc: &LabelMap,
        pred_clf: &LabelMap,
        gt_loc: &LabelMap,
        gt_clf: &LabelMap,
    ) -> Result<()> {
        check_dims(pred_loc, gt_loc)?;
        check_dims(pred_clf, gt_clf)?;
        check_dims(pred_loc, pred_clf)?;
        self.loc.accumulate(pred_loc, gt_loc)?;
        for (&p, &t) in pred_clf.data.iter().zip(&gt_clf.data) {
            if t == 0 || t == IGNORE {
                continue;
            }
            for (l, conf) in self.levels.iter_mut().enumerate() {
                let level = (l + 1) as u8;
                conf.add(t == level, p == level);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &BdaConfusion) {
        self.loc.merge(&other.loc);
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            a.merge(b);
        }
    }

    pub fn metrics(&self) -> BdaMetrics {
        let f1_loc = self.loc.f1();
        let f1_levels: Vec<f64> = self.levels.iter().map(BinaryConfusion::f1).collect();
        let (f1_clf, f1_overall) = bda_scores(f1_loc, &f1_levels);
        BdaMetrics {
            f1_loc,
            f1_levels,
            f1_clf,
            f1_overall,
        }
    }
}

/// Ordered `key=value` metric listing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    entries: Vec<(String, Option<f64>)>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: f64) {
        self.entries.push((key.into(), Some(value)));
    }

    /// Records a metric that has no value for this evaluation.
    pub fn push_undefined(&mut self, key: impl Into<String>) {
        self.entries.push((key.into(), None));
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| *v)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn add_bcd(&mut self, m: &BcdMetrics) {
        self.push("bcd.recall", m.recall);
        self.push("bcd.precision", m.precision);
        self.push("bcd.oa", m.oa);
        self.push("bcd.f1", m.f1);
        self.push("bcd.iou", m.iou);
        self.push("bcd.kappa", m.kappa);
    }

    pub fn add_scd(&mut self, m: &ScdMetrics) {
        self.push("scd.oa", m.oa);
        self.push("scd.f1", m.f1);
        self.push("scd.miou", m.miou);
        match m.sek {
            Ok(v) => self.push("scd.sek", v),
            Err(_) => self.push_undefined("scd.sek"),
        }
    }

    pub fn add_bda(&mut self, m: &BdaMetrics) {
        self.push("bda.f1_loc", m.f1_loc);
        for (i, v) in m.f1_levels.iter().enumerate() {
            self.push(format!("bda.f1_level{}", i + 1), *v);
        }
        self.push("bda.f1_clf", m.f1_clf);
        self.push("bda.f1_overall", m.f1_overall);
    }

    /// One `key=value` line per metric, six decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            match v {
                Some(v) => writeln!(s, "{k}={v:.6}").unwrap(),
                None => writeln!(s, "{k}=undefined").unwrap(),
            }
        }
        s
    }
}
