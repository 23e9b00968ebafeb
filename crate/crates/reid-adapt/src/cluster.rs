//! Threshold selection over a pairwise-distance pool and DBSCAN
//! pseudo-labeling on a precomputed matrix.

use std::collections::VecDeque;

use crate::data::DistanceMatrix;
use crate::error::{Error, Result};

/// Data-driven clustering threshold: the mean of the `top_count` smallest
/// pairwise distances out of a pool of `pool_size = n(n-1)/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Threshold {
    pub tau: f64,
    pub pool_size: usize,
    pub top_count: usize,
}

/// Pseudo-labels produced by DBSCAN. `labels[i]` is `None` for noise;
/// cluster ids are contiguous `0..num_clusters` in order of first appearance
/// by sample index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    pub num_clusters: usize,
    pub core_flags: Vec<bool>,
}

impl ClusterAssignment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Member indices per cluster, clusters in id order, members ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_clusters];
        for (i, label) in self.labels.iter().enumerate() {
            if let Some(c) = label {
                groups[*c].push(i);
            }
        }
        groups
    }
}

/// Unordered-pair statistics implied by an assignment: pairs guessed same
/// (one shared cluster), guessed different (two distinct clusters), and
/// excluded (at least one noise member).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCounts {
    pub same: u64,
    pub diff: u64,
    pub excluded: u64,
}

fn comb2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

pub fn pseudo_label_pairs(a: &ClusterAssignment) -> PairCounts {
    let n = a.labels.len() as u64;
    let sizes: Vec<u64> = a.members().iter().map(|m| m.len() as u64).collect();
    let assigned: u64 = sizes.iter().sum();
    let same: u64 = sizes.iter().map(|&s| comb2(s)).sum();
    let diff = comb2(assigned) - same;
    let excluded = comb2(n) - comb2(assigned);
    PairCounts { same, diff, excluded }
}

/// Pools the strict upper triangle of a symmetric matrix, sorts it
/// ascending (ties keep row-major index order), and averages the smallest
/// `max(1, round(p * N))` values. Rounding is half-up.
pub fn select_threshold(d: &DistanceMatrix, p: f64) -> Result<Threshold> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParam {
            field: "percentage_p",
            reason: format!("must be in (0, 1), got {p}"),
        });
    }
    let n = d.len();
    if n < 2 {
        return Err(Error::EmptyPool);
    }
    let mut pool = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pool.push(d.get(i, j));
        }
    }
    // stable sort: equal values keep their (i, j) lexicographic order
    pool.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let pool_size = pool.len();
    let top_count = ((p * pool_size as f64 + 0.5).floor() as usize).max(1);
    let top_count = top_count.min(pool_size);
    let mut sum = 0.0;
    for v in &pool[..top_count] {
        sum += v;
    }
    Ok(Threshold {
        tau: sum / top_count as f64,
        pool_size,
        top_count,
    })
}

/// Classic DBSCAN over a precomputed symmetric distance matrix.
///
/// A point is core when its closed eps-ball holds at least `min_pts` points
/// (itself included). Clusters are grown from core seeds in ascending index
/// order with FIFO expansion; a border point keeps the cluster of the first
/// core that reaches it. Remaining points are noise.
pub fn dbscan(d: &DistanceMatrix, eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    if eps < 0.0 || eps.is_nan() {
        return Err(Error::NegativeEps { eps });
    }
    if min_pts < 1 {
        return Err(Error::InvalidParam {
            field: "min_pts",
            reason: "must be >= 1".into(),
        });
    }
    if !d.symmetric() {
        return Err(Error::InvalidParam {
            field: "matrix",
            reason: "dbscan requires a symmetric matrix".into(),
        });
    }
    let n = d.len();
    // Region queries, each an ascending index set; independent rows may be
    // computed in parallel without affecting the scan order below.
    let neighbors: Vec<Vec<usize>> = {
        use rayon::prelude::*;
        (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i && d.get(i, j) <= eps)
                    .collect()
            })
            .collect()
    };
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() + 1 >= min_pts).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next_cluster = 0usize;
    for seed in 0..n {
        if visited[seed] || !core[seed] {
            continue;
        }
        let cid = next_cluster;
        next_cluster += 1;
        visited[seed] = true;
        labels[seed] = Some(cid);
        let mut queue = VecDeque::from([seed]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(cid);
                }
                if !visited[q] {
                    visited[q] = true;
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }

    // Renumber so ids are contiguous in order of first appearance by index.
    let mut remap: Vec<Option<usize>> = vec![None; next_cluster];
    let mut fresh = 0usize;
    for label in labels.iter_mut().flatten() {
        let new = *remap[*label].get_or_insert_with(|| {
            let id = fresh;
            fresh += 1;
            id
        });
        *label = new;
    }
    Ok(ClusterAssignment {
        labels,
        num_clusters: next_cluster,
        core_flags: core,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DistanceKind;
    use crate::mat::Mat;
    use crate::metric::sq_euclidean_matrix;

    fn matrix_1d(points: &[f64]) -> DistanceMatrix {
        sq_euclidean_matrix(&Mat::from_vec(points.len(), 1, points.to_vec()))
    }

    fn combined(n: usize, upper: &[f64]) -> DistanceMatrix {
        let mut m = Mat::zeros(n, n);
        let mut it = upper.iter();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = *it.next().unwrap();
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        DistanceMatrix::new(DistanceKind::Combined, true, m).unwrap()
    }

    #[test]
    fn threshold_top_two_of_six() {
        let d = combined(4, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        // N = 6; pick p so that round(p*6) = 2
        let t = select_threshold(&d, 0.3).unwrap();
        assert_eq!(t.pool_size, 6);
        assert_eq!(t.top_count, 2);
        assert!((t.tau - 0.15).abs() < 1e-15);
    }

    #[test]
    fn threshold_all_equal_gives_that_value() {
        let d = combined(4, &[0.7; 6]);
        for p in [0.01, 0.5, 0.99] {
            let t = select_threshold(&d, p).unwrap();
            // mean of identical values, up to one rounding step
            assert!((t.tau - 0.7).abs() < 1e-15, "tau {}", t.tau);
        }
    }

    #[test]
    fn threshold_clamps_to_one() {
        let d = combined(4, &[0.5, 0.1, 0.3, 0.4, 0.2, 0.6]);
        let t = select_threshold(&d, 1e-9).unwrap();
        assert_eq!(t.top_count, 1);
        assert_eq!(t.tau, 0.1);
    }

    #[test]
    fn threshold_needs_two_samples() {
        let d = matrix_1d(&[0.0]);
        assert!(matches!(select_threshold(&d, 0.5), Err(Error::EmptyPool)));
    }

    #[test]
    fn dbscan_five_points_one_cluster() {
        let d = matrix_1d(&[0.0, 0.1, 0.2, 0.3, 0.4]);
        let a = dbscan(&d, 1.0, 4).unwrap();
        assert_eq!(a.num_clusters, 1);
        assert!(a.labels.iter().all(|l| *l == Some(0)));
    }

    #[test]
    fn dbscan_all_noise_when_eps_too_small() {
        let d = matrix_1d(&[0.0, 10.0, 20.0, 30.0]);
        let a = dbscan(&d, 1.0, 2).unwrap();
        assert_eq!(a.num_clusters, 0);
        assert!(a.labels.iter().all(|l| l.is_none()));
        assert_eq!(a.noise_count(), 4);
    }

    #[test]
    fn dbscan_rejects_negative_eps() {
        let d = matrix_1d(&[0.0, 1.0]);
        assert!(matches!(dbscan(&d, -0.5, 1), Err(Error::NegativeEps { .. })));
    }

    #[test]
    fn dbscan_border_takes_first_cluster() {
        // Hand-built adjacency: cores 2 and 4, point 3 a border of both.
        // The cluster seeded first (ascending index) claims the border.
        let n = 7;
        let mut m = Mat::zeros(n, n);
        fn connect(m: &mut Mat, i: usize, j: usize, v: f64) {
            m.set(i, j, v);
            m.set(j, i, v);
        }
        for i in 0..3 {
            for j in (i + 1)..3 {
                connect(&mut m, i, j, 1.0);
            }
        }
        for i in 4..7 {
            for j in (i + 1)..7 {
                connect(&mut m, i, j, 1.0);
            }
        }
        connect(&mut m, 2, 3, 1.0);
        connect(&mut m, 3, 4, 1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if m.get(i, j) == 0.0 {
                    connect(&mut m, i, j, 10.0);
                }
            }
        }
        let d = DistanceMatrix::new(DistanceKind::Combined, true, m).unwrap();
        let a = dbscan(&d, 1.0, 4).unwrap();
        assert_eq!(a.core_flags, vec![false, false, true, false, true, false, false]);
        assert_eq!(
            a.labels,
            vec![Some(0), Some(0), Some(0), Some(0), Some(1), Some(1), Some(1)]
        );
        assert_eq!(a.num_clusters, 2);
    }

    #[test]
    fn pair_counts_examples() {
        // all noise
        let a = ClusterAssignment {
            labels: vec![None; 5],
            num_clusters: 0,
            core_flags: vec![false; 5],
        };
        assert_eq!(
            pseudo_label_pairs(&a),
            PairCounts { same: 0, diff: 0, excluded: 10 }
        );

        // one cluster of 3 + 2 noise
        let a = ClusterAssignment {
            labels: vec![Some(0), Some(0), Some(0), None, None],
            num_clusters: 1,
            core_flags: vec![true; 5],
        };
        assert_eq!(
            pseudo_label_pairs(&a),
            PairCounts { same: 3, diff: 0, excluded: 7 }
        );

        // two clusters of 2
        let a = ClusterAssignment {
            labels: vec![Some(0), Some(0), Some(1), Some(1)],
            num_clusters: 2,
            core_flags: vec![true; 4],
        };
        assert_eq!(
            pseudo_label_pairs(&a),
            PairCounts { same: 2, diff: 4, excluded: 0 }
        );
    }
}
