//! Cross-entropy, Lovász-softmax and the composite task losses.
//!
//! All losses take per-pixel class probabilities laid out `H x W x K` (or
//! already flattened to `T x K`) and a label map of the same spatial extent.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::label::{LabelMap, IGNORE};

/// Floor applied to probabilities before the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

fn flatten(g: &mut Graph, probs: Var, labels: &LabelMap) -> Result<(Var, usize)> {
    let shape = g.shape(probs).to_vec();
    let k = match shape.as_slice() {
        &[h, w, k] if h == labels.height && w == labels.width => k,
        &[t, k] if t == labels.len() => k,
        s => {
            return Err(Error::Invalid(format!(
                "probabilities {s:?} do not match a {}x{} label map",
                labels.height, labels.width
            )))
        }
    };
    if let Some(bad) = labels.data.iter().find(|&&y| y != IGNORE && y as usize >= k) {
        return Err(Error::Invalid(format!("label {bad} outside {k} classes")));
    }
    let flat = if shape.len() == 3 {
        g.reshape(probs, &[labels.len(), k])?
    } else {
        probs
    };
    Ok((flat, k))
}

/// Mean over non-ignored pixels of `-ln max(P(y), 1e-12)`.
pub fn cross_entropy(g: &mut Graph, probs: Var, labels: &LabelMap) -> Result<Var> {
    let (flat, k) = flatten(g, probs, labels)?;
    let index: Arc<[usize]> = labels
        .data
        .iter()
        .enumerate()
        .filter(|(_, &y)| y != IGNORE)
        .map(|(t, &y)| t * k + y as usize)
        .collect();
    if index.is_empty() {
        return Err(Error::Invalid("cross-entropy over a fully ignored label map".into()));
    }
    let column = g.reshape(flat, &[labels.len() * k, 1])?;
    let picked = g.gather_rows(column, index)?;
    let safe = g.clamp_min(picked, LOG_CLAMP)?;
    let logp = g.log(safe)?;
    let mean = g.mean(logp)?;
    g.scale(mean, -1.0)
}

pub fn lovasz_softmax(g: &mut Graph, probs: Var, labels: &LabelMap) -> Result<Var> {
    let (flat, _) = flatten(g, probs, labels)?;
    g.lovasz_softmax(flat, &labels.data, IGNORE)
}

/// Lovász-softmax of row-normalized `probs` (`T x K`, flat) without a graph.
pub fn lovasz_softmax_value(probs: &[f64], k: usize, labels: &[u8]) -> Result<f64> {
    lovasz_forward_backward(probs, k, labels, IGNORE).map(|(loss, _)| loss)
}

/// Loss value and its gradient with respect to `probs`.
///
/// For every class present in the labels, the per-pixel errors
/// `|[y = c] - P(c)|` are sorted in decreasing order and weighted by the
/// gradient of the Lovász extension of the Jaccard loss; the result is the
/// mean over present classes.
pub(crate) fn lovasz_forward_backward(
    probs: &[f64],
    k: usize,
    labels: &[u8],
    ignore: u8,
) -> Result<(f64, Vec<f64>)> {
    if k == 0 || probs.len() != labels.len() * k {
        return Err(Error::Invalid(format!(
            "lovasz over {} values with {} labels and {k} classes",
            probs.len(),
            labels.len()
        )));
    }
    let valid: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != ignore).collect();
    let present: Vec<usize> = (0..k)
        .filter(|&c| valid.iter().any(|&i| labels[i] as usize == c))
        .collect();
    if present.is_empty() {
        return Err(Error::Invalid("lovasz-softmax with no present classes".into()));
    }
    let weight = 1.0 / present.len() as f64;
    let mut grad = vec![0.0; probs.len()];
    let mut loss = 0.0;
    let mut order: Vec<usize> = Vec::with_capacity(valid.len());
    let mut errors = vec![0.0; labels.len()];
    for &c in &present {
        let mut gts = 0.0;
        for &i in &valid {
            let fg = labels[i] as usize == c;
            gts += f64::from(u8::from(fg));
            errors[i] = if fg { 1.0 - probs[i * k + c] } else { probs[i * k + c] };
        }
        order.clear();
        order.extend_from_slice(&valid);
        // stable: equal errors keep pixel order
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
        let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
        let mut prev_jaccard = 0.0;
        for &i in &order {
            let fg = labels[i] as usize == c;
            if fg {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
            let step = jaccard - prev_jaccard;
            prev_jaccard = jaccard;
            loss += weight * errors[i] * step;
            let sign = if fg { -1.0 } else { 1.0 };
            grad[i * k + c] += weight * sign * step;
        }
    }
    Ok((loss, grad))
}

/// Cross-entropy plus Lovász-softmax on one probability map.
pub fn ce_plus_lovasz(g: &mut Graph, probs: Var, labels: &LabelMap) -> Result<Var> {
    let ce = cross_entropy(g, probs, labels)?;
    let lov = lovasz_softmax(g, probs, labels)?;
    g.add(ce, lov)
}

pub fn bcd_loss(g: &mut Graph, p_bcd: Var, y_bcd: &LabelMap) -> Result<Var> {
    ce_plus_lovasz(g, p_bcd, y_bcd)
}

/// Change terms plus half of the four semantic terms.
pub fn scd_loss(
    g: &mut Graph,
    p_t1: Var,
    p_t2: Var,
    p_bcd: Var,
    y_t1: &LabelMap,
    y_t2: &LabelMap,
    y_bcd: &LabelMap,
) -> Result<Var> {
    let change = ce_plus_lovasz(g, p_bcd, y_bcd)?;
    let s1 = ce_plus_lovasz(g, p_t1, y_t1)?;
    let s2 = ce_plus_lovasz(g, p_t2, y_t2)?;
    let semantic = g.add(s1, s2)?;
    let half = g.scale(semantic, 0.5)?;
    g.add(change, half)
}

pub fn bda_loss(
    g: &mut Graph,
    p_loc: Var,
    p_clf: Var,
    y_loc: &LabelMap,
    y_clf: &LabelMap,
) -> Result<Var> {
    let loc = ce_plus_lovasz(g, p_loc, y_loc)?;
    let clf = ce_plus_lovasz(g, p_clf, y_clf)?;
    g.add(loc, clf)
}
