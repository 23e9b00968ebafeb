//! Pairwise-distance machinery: squared Euclidean matrices, mutual k-NN and
//! k-reciprocal robust sets, kernelized neighbour rows, the Jaccard distance
//! between them, the plain k-NN Jaccard alternative, the source-proximity
//! confidence, and the blended distance.
//!
//! Determinism contract: every producer fills rows independently (safe to
//! parallelize) and reduces within a row in ascending index order, so the
//! output is identical under any worker count.

use rayon::prelude::*;

use crate::data::{DistanceKind, DistanceMatrix};
use crate::error::{Error, Result};
use crate::mat::{sq_dist, Mat};

/// Per-sample neighbour index sets. Each set is sorted ascending and always
/// contains the sample's own index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    pub k: usize,
    pub sets: Vec<Vec<usize>>,
}

impl NeighborSets {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.sets[i].binary_search(&j).is_ok()
    }
}

/// Per-target-sample confidence derived from the distance to the nearest
/// source sample: `raw[i] = 1 - exp(-min_s ||t_i - s||^2)`, and `normalized`
/// divides by the maximum raw value (all zeros when the maximum is zero).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightConfidence {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Symmetric matrix of squared Euclidean distances with a zero diagonal.
pub fn sq_euclidean_matrix(features: &Mat) -> DistanceMatrix {
    let m = pairwise(features, sq_dist);
    DistanceMatrix::new(DistanceKind::SqEuclidean, true, m)
        .expect("squared distances satisfy the matrix invariants")
}

/// Symmetric matrix of plain Euclidean distances (the baseline metric).
pub fn euclidean_matrix(features: &Mat) -> DistanceMatrix {
    let m = pairwise(features, |a, b| sq_dist(a, b).sqrt());
    DistanceMatrix::new(DistanceKind::Euclidean, true, m)
        .expect("distances satisfy the matrix invariants")
}

fn pairwise(features: &Mat, f: impl Fn(&[f64], &[f64]) -> f64 + Sync) -> Mat {
    let n = features.rows();
    let mut out = Mat::zeros(n, n);
    out.par_rows_mut().enumerate().for_each(|(i, row)| {
        let a = features.row(i);
        for j in 0..n {
            row[j] = if i == j { 0.0 } else { f(a, features.row(j)) };
        }
    });
    out
}

/// For each sample, the `k` nearest other samples ranked by
/// `(distance, index)`; the sample itself is excluded.
pub fn knn_lists(d: &DistanceMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = d.len();
    if k >= n {
        return Err(Error::KTooLarge { k, n });
    }
    if k == 0 {
        return Err(Error::InvalidParam {
            field: "k",
            reason: "k must be >= 1".into(),
        });
    }
    let lists: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = d.row(i);
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| {
                row[a]
                    .partial_cmp(&row[b])
                    .expect("distances are finite")
                    .then(a.cmp(&b))
            });
            order.truncate(k);
            order
        })
        .collect();
    Ok(lists)
}

/// Mutual k-nearest-neighbour sets:
/// `sets[i] = {i} U { j : j in knn(i) and i in knn(j) }`.
pub fn mutual_knn(d: &DistanceMatrix, k: usize) -> Result<NeighborSets> {
    let lists = knn_lists(d, k)?;
    let n = d.len();
    let mut member = vec![vec![false; n]; n];
    for (i, list) in lists.iter().enumerate() {
        for &j in list {
            member[i][j] = true;
        }
    }
    let sets = (0..n)
        .map(|i| {
            let mut set: Vec<usize> = lists[i]
                .iter()
                .copied()
                .filter(|&j| member[j][i])
                .collect();
            set.push(i);
            set.sort_unstable();
            set
        })
        .collect();
    Ok(NeighborSets { k, sets })
}

/// k-reciprocal robust sets.
///
/// Starting from the mutual set `K_k(i)`, every member `s` whose mutual
/// half-neighbourhood `K_{k/2}(s)` overlaps `K_k(i)` in at least two thirds
/// of its size is absorbed: `I_i <- I_i U K_{k/2}(s)`. The overlap test runs
/// against the original `K_k(i)` (not the growing set), members are visited
/// in ascending index order, and the half-neighbourhood uses `floor(k/2)`.
///
/// Neighbourhood sizes are clamped to the `n - 1` neighbours that exist, so
/// small sets degrade gracefully instead of erroring.
pub fn robust_sets(d: &DistanceMatrix, k: usize) -> Result<NeighborSets> {
    if k < 2 {
        return Err(Error::InvalidParam {
            field: "k",
            reason: "robust sets need k >= 2".into(),
        });
    }
    let n = d.len();
    if n < 2 {
        return Err(Error::KTooLarge { k, n });
    }
    let k_full = k.min(n - 1);
    let k_half = (k / 2).max(1).min(n - 1);
    let full = mutual_knn(d, k_full)?;
    let half = mutual_knn(d, k_half)?;
    let sets = full
        .sets
        .iter()
        .map(|kk| {
            let mut expanded: Vec<usize> = kk.clone();
            for &s in kk {
                let hs = &half.sets[s];
                // |K_k(i) ∩ K_{k/2}(s)| >= (2/3)|K_{k/2}(s)|, exactly in integers
                let overlap = intersection_size(kk, hs);
                if 3 * overlap >= 2 * hs.len() {
                    expanded.extend_from_slice(hs);
                }
            }
            expanded.sort_unstable();
            expanded.dedup();
            expanded
        })
        .collect();
    Ok(NeighborSets { k, sets })
}

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut count) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                i += 1;
                j += 1;
            }
        }
    }
    count
}

/// Row-indexed kernelized neighbour weights:
/// `M[i][j] = exp(-D[i][j])` when `j` is in the robust set of `i`, else 0.
/// The diagonal is 1. Not symmetric in general.
pub fn kernelized_matrix(d: &DistanceMatrix, sets: &NeighborSets) -> Result<DistanceMatrix> {
    let n = d.len();
    if sets.len() != n {
        return Err(Error::SizeMismatch {
            detail: format!("matrix has {} rows, neighbour sets {}", n, sets.len()),
        });
    }
    let mut out = Mat::zeros(n, n);
    out.par_rows_mut().enumerate().for_each(|(i, row)| {
        for &j in &sets.sets[i] {
            row[j] = (-d.get(i, j)).exp();
        }
    });
    DistanceMatrix::new(DistanceKind::Kernelized, false, out)
}

/// Jaccard distance between kernelized rows:
/// `1 - sum_k min(M_ik, M_jk) / sum_k max(M_ik, M_jk)`.
///
/// Exploits row sparsity (only robust-set columns are nonzero); sums run in
/// ascending column order, which matches the dense definition bit for bit
/// because skipped terms are exact zeros.
pub fn jaccard_distance(m: &DistanceMatrix) -> Result<DistanceMatrix> {
    if m.kind() != DistanceKind::Kernelized {
        return Err(Error::InvalidParam {
            field: "kind",
            reason: format!("jaccard_distance expects a kernelized matrix, got {:?}", m.kind()),
        });
    }
    let n = m.len();
    let supports: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            m.row(i)
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    for (i, support) in supports.iter().enumerate() {
        if support.is_empty() {
            return Err(Error::DegenerateRow { row: i });
        }
    }

    let mut out = Mat::zeros(n, n);
    out.par_rows_mut().enumerate().for_each(|(i, row)| {
        let ri = m.row(i);
        let si = &supports[i];
        for j in 0..n {
            if i == j {
                continue;
            }
            let rj = m.row(j);
            let sj = &supports[j];
            let (mut min_sum, mut max_sum) = (0.0f64, 0.0f64);
            let (mut a, mut b) = (0usize, 0usize);
            while a < si.len() || b < sj.len() {
                let ka = si.get(a).copied().unwrap_or(usize::MAX);
                let kb = sj.get(b).copied().unwrap_or(usize::MAX);
                let k = ka.min(kb);
                let (vi, vj) = (if ka == k { ri[k] } else { 0.0 }, if kb == k { rj[k] } else { 0.0 });
                min_sum += vi.min(vj);
                max_sum += vi.max(vj);
                if ka == k {
                    a += 1;
                }
                if kb == k {
                    b += 1;
                }
            }
            row[j] = 1.0 - min_sum / max_sum;
        }
    });
    DistanceMatrix::new(DistanceKind::Jaccard, true, out)
}

/// Jaccard distance between plain k-NN sets `A_i = {i} U knn(i)`:
/// `1 - |A_i ∩ A_j| / |A_i U A_j|`.
pub fn plain_jaccard(d: &DistanceMatrix, k: usize) -> Result<DistanceMatrix> {
    let lists = knn_lists(d, k)?;
    let n = d.len();
    let sets: Vec<Vec<usize>> = lists
        .into_iter()
        .enumerate()
        .map(|(i, mut list)| {
            list.push(i);
            list.sort_unstable();
            list
        })
        .collect();
    let mut out = Mat::zeros(n, n);
    out.par_rows_mut().enumerate().for_each(|(i, row)| {
        for j in 0..n {
            if i == j {
                continue;
            }
            let inter = intersection_size(&sets[i], &sets[j]) as f64;
            let union = (sets[i].len() + sets[j].len()) as f64 - inter;
            row[j] = 1.0 - inter / union;
        }
    });
    DistanceMatrix::new(DistanceKind::PlainJaccard, true, out)
}

/// Source-proximity confidence for every target sample.
pub fn weight_confidence(target: &Mat, source: &Mat) -> Result<WeightConfidence> {
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
    let raw: Vec<f64> = (0..target.rows())
        .into_par_iter()
        .map(|i| {
            let t = target.row(i);
            let mut best = f64::INFINITY;
            for s in 0..source.rows() {
                let d = sq_dist(t, source.row(s));
                if d < best {
                    best = d;
                }
            }
            1.0 - (-best).exp()
        })
        .collect();
    let max = raw.iter().copied().fold(0.0f64, f64::max);
    let normalized = if max > 0.0 {
        raw.iter().map(|&v| v / max).collect()
    } else {
        vec![0.0; raw.len()]
    };
    Ok(WeightConfidence { raw, normalized })
}

/// Blend of a Jaccard-family (or baseline Euclidean) distance with the
/// normalized confidence: `(1-λ)·D[i][j] + λ·(w[i] + w[j])`. The diagonal
/// becomes `2λ·w[i]`.
pub fn combined_distance(
    dj: &DistanceMatrix,
    w: &WeightConfidence,
    lambda: f64,
) -> Result<DistanceMatrix> {
    if !matches!(
        dj.kind(),
        DistanceKind::Jaccard | DistanceKind::PlainJaccard | DistanceKind::Euclidean
    ) {
        return Err(Error::InvalidParam {
            field: "kind",
            reason: format!("cannot blend confidence into a {:?} matrix", dj.kind()),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParam {
            field: "balance_lambda",
            reason: format!("must be in [0, 1], got {lambda}"),
        });
    }
    let n = dj.len();
    if w.normalized.len() != n {
        return Err(Error::SizeMismatch {
            detail: format!("matrix has {} rows, confidence vector {}", n, w.normalized.len()),
        });
    }
    let w = &w.normalized;
    let mut out = Mat::zeros(n, n);
    out.par_rows_mut().enumerate().for_each(|(i, row)| {
        for j in 0..n {
            row[j] = (1.0 - lambda) * dj.get(i, j) + lambda * (w[i] + w[j]);
        }
    });
    DistanceMatrix::new(DistanceKind::Combined, true, out)
}

/// Rectangular plain-Euclidean distances between two feature matrices
/// (rows of `a` against rows of `b`).
pub fn cross_euclidean(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            detail: format!("left dimension {} != right dimension {}", a.cols(), b.cols()),
        });
    }
    let mut out = Mat::zeros(a.rows(), b.rows());
    out.par_rows_mut().enumerate().for_each(|(i, row)| {
        let ra = a.row(i);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = sq_dist(ra, b.row(j)).sqrt();
        }
    });
    Ok(out)
}
