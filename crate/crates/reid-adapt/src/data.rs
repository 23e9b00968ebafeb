//! Domain types: embedding sets with per-sample metadata, and tagged
//! distance matrices.

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Which distribution a sample was drawn from. Identity ids live in
/// disjoint namespaces per domain: the tag disambiguates, so files from
/// different domains may reuse raw id values without ever denoting the
/// same identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    Source,
    Target,
}

/// Per-sample metadata. `identity` is `None` exactly when the sample is
/// unlabeled; `camera` may be `None` only when retrieval evaluation is not
/// requested for the set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleMeta {
    pub identity: Option<i64>,
    pub camera: Option<i64>,
    pub domain: DomainTag,
}

/// An `n x d` feature matrix plus per-sample metadata.
///
/// Features are stored as `f32` row-major — the unit of account of the
/// on-disk formats — and promoted to `f64` for all computation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    features: Vec<f32>,
    n: usize,
    d: usize,
    meta: Vec<SampleMeta>,
    name: String,
}

impl EmbeddingSet {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        d: usize,
        features: Vec<f32>,
        meta: Vec<SampleMeta>,
    ) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::DimensionMismatch {
                detail: format!("embedding set needs n >= 1 and d >= 1, got n={n}, d={d}"),
            });
        }
        if features.len() != n * d {
            return Err(Error::DimensionMismatch {
                detail: format!(
                    "feature buffer holds {} values, expected n*d = {}",
                    features.len(),
                    n * d
                ),
            });
        }
        if meta.len() != n {
            return Err(Error::SizeMismatch {
                detail: format!("{} meta entries for {} samples", meta.len(), n),
            });
        }
        for (i, row) in features.chunks(d).enumerate() {
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue { row: i, col: j });
                }
            }
        }
        let domain = meta[0].domain;
        if meta.iter().any(|m| m.domain != domain) {
            return Err(Error::InvalidParam {
                field: "meta",
                reason: "all samples of a set must share one domain tag".into(),
            });
        }
        Ok(EmbeddingSet {
            features,
            n,
            d,
            meta,
            name: name.into(),
        })
    }

    /// Set with uniform metadata (one domain, no labels, no cameras).
    pub fn unlabeled(
        name: impl Into<String>,
        n: usize,
        d: usize,
        features: Vec<f32>,
        domain: DomainTag,
    ) -> Result<Self> {
        let meta = vec![
            SampleMeta {
                identity: None,
                camera: None,
                domain,
            };
            n
        ];
        Self::new(name, n, d, features, meta)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn meta(&self) -> &[SampleMeta] {
        &self.meta
    }

    pub fn domain(&self) -> DomainTag {
        self.meta[0].domain
    }

    pub fn feature_row(&self, i: usize) -> &[f32] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn features_raw(&self) -> &[f32] {
        &self.features
    }

    /// Promote the feature matrix to `f64` for computation.
    pub fn to_features(&self) -> Mat {
        Mat::from_vec(
            self.n,
            self.d,
            self.features.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Identity of each sample, `None` where unlabeled.
    pub fn identities(&self) -> Vec<Option<i64>> {
        self.meta.iter().map(|m| m.identity).collect()
    }

    /// True when every sample carries an identity.
    pub fn fully_labeled(&self) -> bool {
        self.meta.iter().all(|m| m.identity.is_some())
    }

    /// Sub-set with rows at `indices`, preserving order and metadata.
    pub fn select(&self, name: impl Into<String>, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.d);
        let mut meta = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.feature_row(i));
            meta.push(self.meta[i]);
        }
        Self::new(name, indices.len(), self.d, features, meta)
    }
}

/// What a distance matrix's entries mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    /// Squared Euclidean distance.
    SqEuclidean,
    /// Plain Euclidean distance (the baseline metric).
    Euclidean,
    /// Row-indexed kernelized neighbour weights `exp(-d^2)` restricted to
    /// each row's robust set. Not a metric and not symmetric.
    Kernelized,
    /// Jaccard distance between kernelized neighbour rows.
    Jaccard,
    /// Jaccard distance between plain k-nearest-neighbour sets.
    PlainJaccard,
    /// Jaccard-family distance blended with per-sample confidence terms;
    /// the diagonal may be nonzero.
    Combined,
}

impl DistanceKind {
    /// Stable byte tag used by the `DMAT` dump format.
    pub fn code(self) -> u8 {
        match self {
            DistanceKind::SqEuclidean => 0,
            DistanceKind::Kernelized => 1,
            DistanceKind::Jaccard => 2,
            DistanceKind::Combined => 3,
            DistanceKind::PlainJaccard => 4,
            DistanceKind::Euclidean => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => DistanceKind::SqEuclidean,
            1 => DistanceKind::Kernelized,
            2 => DistanceKind::Jaccard,
            3 => DistanceKind::Combined,
            4 => DistanceKind::PlainJaccard,
            5 => DistanceKind::Euclidean,
            _ => return None,
        })
    }

    fn zero_diagonal(self) -> bool {
        matches!(
            self,
            DistanceKind::SqEuclidean
                | DistanceKind::Euclidean
                | DistanceKind::Jaccard
                | DistanceKind::PlainJaccard
        )
    }
}

/// Dense `n x n` nonnegative matrix with a declared kind and symmetry flag.
///
/// Construction validates the kind's invariants: finite nonnegative entries,
/// exact symmetry when flagged, and a zero diagonal for the metric kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    kind: DistanceKind,
    symmetric: bool,
    mat: Mat,
}

impl DistanceMatrix {
    pub fn new(kind: DistanceKind, symmetric: bool, mat: Mat) -> Result<Self> {
        if mat.rows() != mat.cols() {
            return Err(Error::ShapeMismatch {
                detail: format!("distance matrix must be square, got {}x{}", mat.rows(), mat.cols()),
            });
        }
        let n = mat.rows();
        for i in 0..n {
            for (j, &v) in mat.row(i).iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue { row: i, col: j });
                }
                if v < 0.0 {
                    return Err(Error::InvalidParam {
                        field: "values",
                        reason: format!("negative distance {v} at ({i},{j})"),
                    });
                }
            }
        }
        if symmetric {
            for i in 0..n {
                for j in (i + 1)..n {
                    if mat.get(i, j) != mat.get(j, i) {
                        return Err(Error::InvalidParam {
                            field: "values",
                            reason: format!("declared symmetric but ({i},{j}) != ({j},{i})"),
                        });
                    }
                }
            }
        }
        if kind.zero_diagonal() {
            for i in 0..n {
                if mat.get(i, i) != 0.0 {
                    return Err(Error::InvalidParam {
                        field: "values",
                        reason: format!("kind {kind:?} requires a zero diagonal, got {} at {i}", mat.get(i, i)),
                    });
                }
            }
        }
        Ok(DistanceMatrix { kind, symmetric, mat })
    }

    pub fn kind(&self) -> DistanceKind {
        self.kind
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn len(&self) -> usize {
        self.mat.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.mat.rows() == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.mat.get(i, j)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.mat.row(i)
    }

    pub fn mat(&self) -> &Mat {
        &self.mat
    }
}
