//! Diagnostic losses over pseudo-labeled pairs (intra/inter cluster
//! distance, mean target-to-source nearest-neighbour distance) and the
//! training losses (batch-hard triplet, softmax cross-entropy) with
//! analytic gradients.

use crate::cluster::{pseudo_label_pairs, ClusterAssignment, PairCounts};
use crate::error::{Error, Result};
use crate::mat::{dist, sq_dist, Mat};

/// A pairwise distance below this is treated as zero when differentiating a
/// norm (which is not differentiable at coincident points).
const NORM_GRAD_GUARD: f64 = 1e-12;

/// One evaluation of the diagnostic losses.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_wr: f64,
    pub pair_counts: PairCounts,
}

/// Sum of plain Euclidean distances over unordered guessed-same pairs
/// (pairs sharing one non-noise cluster), in ascending `(i, j)` order.
pub fn loss_intra(features: &Mat, a: &ClusterAssignment) -> Result<f64> {
    check_sizes(features, a)?;
    let n = features.rows();
    let mut acc = 0.0;
    for i in 0..n {
        let Some(ci) = a.labels[i] else { continue };
        for j in (i + 1)..n {
            if a.labels[j] == Some(ci) {
                acc += dist(features.row(i), features.row(j));
            }
        }
    }
    Ok(acc)
}

/// Negated sum of plain Euclidean distances over unordered guessed-different
/// pairs (both members clustered, clusters distinct).
pub fn loss_inter(features: &Mat, a: &ClusterAssignment) -> Result<f64> {
    check_sizes(features, a)?;
    let n = features.rows();
    let mut acc = 0.0;
    for i in 0..n {
        let Some(ci) = a.labels[i] else { continue };
        for j in (i + 1)..n {
            match a.labels[j] {
                Some(cj) if cj != ci => acc -= dist(features.row(i), features.row(j)),
                _ => {}
            }
        }
    }
    Ok(acc)
}

/// Mean over target samples of the plain-norm distance to the nearest
/// source sample.
pub fn loss_wr(target: &Mat, source: &Mat) -> Result<f64> {
    if target.cols() != source.cols() {
        return Err(Error::DimensionMismatch {
            detail: format!(
                "target dimension {} != source dimension {}",
                target.cols(),
                source.cols()
            ),
        });
    }
    if source.rows() == 0 {
        return Err(Error::EmptySource);
    }
    let mut acc = 0.0;
    for i in 0..target.rows() {
        let t = target.row(i);
        let mut best = f64::INFINITY;
        for s in 0..source.rows() {
            let d = sq_dist(t, source.row(s));
            if d < best {
                best = d;
            }
        }
        acc += best.sqrt();
    }
    Ok(acc / target.rows() as f64)
}

/// Evaluates all three diagnostics in one pass.
pub fn loss_report(target: &Mat, source: &Mat, a: &ClusterAssignment) -> Result<LossReport> {
    Ok(LossReport {
        l_intra: loss_intra(target, a)?,
        l_inter: loss_inter(target, a)?,
        l_wr: loss_wr(target, source)?,
        pair_counts: pseudo_label_pairs(a),
    })
}

fn check_sizes(features: &Mat, a: &ClusterAssignment) -> Result<()> {
    if features.rows() != a.labels.len() {
        return Err(Error::SizeMismatch {
            detail: format!(
                "{} feature rows vs {} assignment entries",
                features.rows(),
                a.labels.len()
            ),
        });
    }
    Ok(())
}

/// A PK batch for the triplet loss: `b x d` features, one pseudo-identity
/// per row, and the hinge margin.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub features: Mat,
    pub labels: Vec<usize>,
    pub margin: f64,
}

/// Batch-hard triplet loss and its gradient with respect to the features.
///
/// Every row anchors one term: the hardest positive is the farthest
/// same-label row, the hardest negative the closest different-label row
/// (ties broken by ascending index), and the anchor contributes
/// `max(0, margin + d(a, p) - d(a, n))`. The result is the mean over
/// anchors. The gradient is exactly zero on anchors whose hinge is
/// inactive.
pub fn triplet_batch_hard(batch: &TripletBatch) -> Result<(f64, Mat)> {
    let b = batch.features.rows();
    if batch.labels.len() != b {
        return Err(Error::SizeMismatch {
            detail: format!("{} labels for {} rows", batch.labels.len(), b),
        });
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in &batch.labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::DegenerateBatch {
            reason: "a triplet batch needs at least two distinct labels".into(),
        });
    }
    if let Some((&label, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::DegenerateBatch {
            reason: format!("label {label} has no positive partner in the batch"),
        });
    }

    let mut d = Mat::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            if i != j {
                d.set(i, j, dist(batch.features.row(i), batch.features.row(j)));
            }
        }
    }

    let mut total = 0.0;
    let mut grad = Mat::zeros(b, batch.features.cols());
    let inv_b = 1.0 / b as f64;
    for a in 0..b {
        let (mut hard_pos, mut dp) = (usize::MAX, f64::NEG_INFINITY);
        let (mut hard_neg, mut dn) = (usize::MAX, f64::INFINITY);
        for j in 0..b {
            if j == a {
                continue;
            }
            if batch.labels[j] == batch.labels[a] {
                if d.get(a, j) > dp {
                    dp = d.get(a, j);
                    hard_pos = j;
                }
            } else if d.get(a, j) < dn {
                dn = d.get(a, j);
                hard_neg = j;
            }
        }
        let t = batch.margin + dp - dn;
        if t.is_nan() {
            // poisoned distances (non-finite features); surface a
            // non-finite loss instead of indexing unset miners
            return Ok((f64::NAN, Mat::zeros(b, batch.features.cols())));
        }
        if t <= 0.0 {
            continue;
        }
        total += t;
        // d/dx ||x - y|| = (x - y) / ||x - y||, guarded at coincidence
        accumulate_norm_grad(&mut grad, &batch.features, a, hard_pos, dp, inv_b);
        accumulate_norm_grad(&mut grad, &batch.features, a, hard_neg, dn, -inv_b);
    }
    Ok((total * inv_b, grad))
}

fn accumulate_norm_grad(grad: &mut Mat, features: &Mat, i: usize, j: usize, d: f64, scale: f64) {
    if d < NORM_GRAD_GUARD {
        return;
    }
    let coeff = scale / d;
    for c in 0..features.cols() {
        let diff = features.get(i, c) - features.get(j, c);
        grad.set(i, c, grad.get(i, c) + coeff * diff);
        grad.set(j, c, grad.get(j, c) - coeff * diff);
    }
}

/// Mean softmax cross-entropy over a `b x C` logit matrix, with the
/// gradient `(softmax - onehot) / b`. Stabilized with log-sum-exp.
pub fn softmax_ce(logits: &Mat, targets: &[usize]) -> Result<(f64, Mat)> {
    let b = logits.rows();
    let c = logits.cols();
    if targets.len() != b {
        return Err(Error::SizeMismatch {
            detail: format!("{} targets for {} rows", targets.len(), b),
        });
    }
    for (row, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::BadTarget {
                row,
                class: t,
                num_classes: c,
            });
        }
    }
    let mut total = 0.0;
    let mut grad = Mat::zeros(b, c);
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        total += lse - row[targets[i]];
        let g = grad.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            g[j] = ((v - lse).exp() - (j == targets[i]) as usize as f64) * inv_b;
        }
    }
    Ok((total * inv_b, grad))
}
