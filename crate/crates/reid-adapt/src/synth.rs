//! Deterministic synthetic domains for desk-scale experiments.
//!
//! Identities are Gaussian blobs around uniformly drawn means. The target
//! domain draws fresh identity means, pushes them through a rigid shift
//! (random rotation + translation), and adds one offset vector per camera —
//! a stand-in for camera-correlated appearance gaps. All draws come from
//! [`SplitMix64`] in a pinned order, so a spec reproduces its domains bit
//! for bit.

use crate::data::{DomainTag, EmbeddingSet, SampleMeta};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Half-width of the uniform box identity means are drawn from. Fixed so
/// that a spec fully determines its domains.
const MEAN_SPREAD: f64 = 0.8;

/// Rigid shift applied to target identity means, plus per-camera offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    /// Seed of the random orthogonal matrix; `None` keeps the identity.
    pub rotation_seed: Option<u64>,
    /// Added to every target mean. Empty = zero; a single value broadcasts
    /// to every dimension; otherwise the length must equal `dim`.
    pub translation: Vec<f64>,
    /// Norm of each per-camera additive offset (target side only).
    pub camera_offset_scale: f64,
}

impl DomainShift {
    pub fn none() -> Self {
        DomainShift {
            rotation_seed: None,
            translation: Vec::new(),
            camera_offset_scale: 0.0,
        }
    }
}

/// Generator parameters for a source/target domain pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_ids_source: usize,
    pub num_ids_target: usize,
    pub samples_per_id: usize,
    pub dim: usize,
    pub cluster_sigma: f64,
    pub shift: DomainShift,
    pub cameras: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// The pinned benchmark scenario used by the test-suite and the CLI
    /// defaults: 32 + 32 identities, 20 samples each, 16 dimensions, tight
    /// blobs, a rigid target shift and moderate camera offsets.
    pub fn reference() -> Self {
        SynthSpec {
            num_ids_source: 32,
            num_ids_target: 32,
            samples_per_id: 20,
            dim: 16,
            cluster_sigma: 0.15,
            shift: DomainShift {
                rotation_seed: Some(7),
                translation: vec![0.32],
                camera_offset_scale: 2.0,
            },
            cameras: 4,
            seed: 42,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidSpec { line: None, reason };
        if self.num_ids_source < 1 || self.num_ids_target < 1 {
            return Err(bad("both domains need at least one identity".into()));
        }
        if self.samples_per_id < 1 {
            return Err(bad("samples_per_id must be >= 1".into()));
        }
        if self.dim < 1 {
            return Err(bad("dim must be >= 1".into()));
        }
        if !(self.cluster_sigma > 0.0 && self.cluster_sigma.is_finite()) {
            return Err(bad(format!("cluster_sigma must be positive, got {}", self.cluster_sigma)));
        }
        if self.cameras < 2 {
            return Err(bad("cameras must be >= 2".into()));
        }
        if !(self.shift.camera_offset_scale >= 0.0 && self.shift.camera_offset_scale.is_finite()) {
            return Err(bad(format!(
                "camera_offset_scale must be nonnegative, got {}",
                self.shift.camera_offset_scale
            )));
        }
        let t = self.shift.translation.len();
        if t > 1 && t != self.dim {
            return Err(bad(format!(
                "translation needs 0, 1 or dim={} entries, got {t}",
                self.dim
            )));
        }
        if self.shift.translation.iter().any(|v| !v.is_finite()) {
            return Err(bad("translation entries must be finite".into()));
        }
        Ok(())
    }
}

/// Generates the (source, target) pair described by `spec`.
///
/// Both sets are fully labeled with disjoint identity ranges (source ids
/// `0..num_ids_source`, target ids continue from there); target labels are
/// meant for evaluation only. Cameras are assigned round-robin per identity.
pub fn gen_domains(spec: &SynthSpec) -> Result<(EmbeddingSet, EmbeddingSet)> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = SplitMix64::new(spec.seed);

    // Draw order is pinned: source means, target means, camera offsets,
    // source samples, target samples.
    let source_means: Vec<Vec<f64>> = (0..spec.num_ids_source)
        .map(|_| (0..d).map(|_| rng.next_range(-MEAN_SPREAD, MEAN_SPREAD)).collect())
        .collect();
    let target_means_raw: Vec<Vec<f64>> = (0..spec.num_ids_target)
        .map(|_| (0..d).map(|_| rng.next_range(-MEAN_SPREAD, MEAN_SPREAD)).collect())
        .collect();

    // Target cameras sit along one seeded direction at equal steps (a rig
    // on a line): adjacent cameras stay close while the endpoints are a
    // full `camera_offset_scale` apart.
    let camera_offsets: Vec<Vec<f64>> = {
        let g: Vec<f64> = (0..d).map(|_| rng.next_gauss()).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let axis: Vec<f64> = if norm > 0.0 {
            g.iter().map(|v| v / norm).collect()
        } else {
            let mut e = vec![0.0; d];
            e[0] = 1.0;
            e
        };
        (0..spec.cameras)
            .map(|c| {
                let pos = c as f64 / (spec.cameras - 1) as f64 - 0.5;
                axis
                    .iter()
                    .map(|v| v * spec.shift.camera_offset_scale * pos)
                    .collect()
            })
            .collect()
    };

    let rotation = spec.shift.rotation_seed.map(|s| random_orthogonal(d, s));
    let translation: Vec<f64> = match spec.shift.translation.len() {
        0 => vec![0.0; d],
        1 => vec![spec.shift.translation[0]; d],
        _ => spec.shift.translation.clone(),
    };
    let target_means: Vec<Vec<f64>> = target_means_raw
        .iter()
        .map(|m| {
            let rotated = match &rotation {
                Some(q) => apply_matrix(q, m),
                None => m.clone(),
            };
            rotated.iter().zip(&translation).map(|(a, b)| a + b).collect()
        })
        .collect();

    let source = sample_domain(
        "source",
        &source_means,
        0,
        spec,
        None,
        DomainTag::Source,
        &mut rng,
    )?;
    let target = sample_domain(
        "target",
        &target_means,
        spec.num_ids_source as i64,
        spec,
        Some(&camera_offsets),
        DomainTag::Target,
        &mut rng,
    )?;
    Ok((source, target))
}

fn sample_domain(
    name: &str,
    means: &[Vec<f64>],
    id_base: i64,
    spec: &SynthSpec,
    camera_offsets: Option<&Vec<Vec<f64>>>,
    domain: DomainTag,
    rng: &mut SplitMix64,
) -> Result<EmbeddingSet> {
    let d = spec.dim;
    let n = means.len() * spec.samples_per_id;
    let mut features = Vec::with_capacity(n * d);
    let mut meta = Vec::with_capacity(n);
    for (id, mean) in means.iter().enumerate() {
        for s in 0..spec.samples_per_id {
            let camera = (s % spec.cameras) as i64;
            for (j, &m) in mean.iter().enumerate() {
                let mut v = m + spec.cluster_sigma * rng.next_gauss();
                if let Some(offsets) = camera_offsets {
                    v += offsets[camera as usize][j];
                }
                features.push(v as f32);
            }
            meta.push(SampleMeta {
                identity: Some(id_base + id as i64),
                camera: Some(camera),
                domain,
            });
        }
    }
    EmbeddingSet::new(name, n, d, features, meta)
}

/// Random orthogonal matrix: seeded Gaussian matrix orthonormalized with
/// modified Gram-Schmidt in fixed row order.
fn random_orthogonal(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SplitMix64::new(seed);
    let mut rows: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| rng.next_gauss()).collect())
        .collect();
    for i in 0..d {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = rows.split_at_mut(i);
            for (v, &u) in tail[0].iter_mut().zip(&head[j]) {
                *v -= dot * u;
            }
        }
        let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in rows[i].iter_mut() {
            *v /= norm;
        }
    }
    rows
}

fn apply_matrix(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// The 2-D confidence-weighting demonstration scene.
///
/// Three source identities sit at well-separated means. Each of the three
/// target identities has "easy" samples right on top of one source cluster
/// and a drifted tail far from every source point; the drifted tails of
/// different identities overlap each other. Returns (source, target,
/// expected target identities).
pub fn gen_weight_ratio_toy(seed: u64) -> (EmbeddingSet, EmbeddingSet, Vec<i64>) {
    let mut rng = SplitMix64::new(seed);
    let source_means = [(0.0, 0.0), (6.0, 0.0), (0.0, 6.0)];
    let sigma = 0.2;
    let per_source = 20;

    let mut s_feat = Vec::new();
    let mut s_meta = Vec::new();
    for (id, &(cx, cy)) in source_means.iter().enumerate() {
        for s in 0..per_source {
            s_feat.push((cx + sigma * rng.next_gauss()) as f32);
            s_feat.push((cy + sigma * rng.next_gauss()) as f32);
            s_meta.push(SampleMeta {
                identity: Some(id as i64),
                camera: Some((s % 2) as i64),
                domain: DomainTag::Source,
            });
        }
    }
    let source = EmbeddingSet::new("toy-source", s_meta.len(), 2, s_feat, s_meta)
        .expect("toy source construction");

    // Drifted tails cluster together far from the source: indistinguishable
    // by geometry alone, but maximally low-confidence by source proximity.
    let drift_centers = [(12.0, 12.0), (12.6, 12.0), (12.0, 12.6)];
    let easy_per_id = 8;
    let drift_per_id = 5;
    let mut t_feat = Vec::new();
    let mut t_meta = Vec::new();
    let mut expected = Vec::new();
    for id in 0..3usize {
        let target_id = 3 + id as i64;
        let (ex, ey) = source_means[id];
        for _ in 0..easy_per_id {
            t_feat.push((ex + sigma * rng.next_gauss()) as f32);
            t_feat.push((ey + sigma * rng.next_gauss()) as f32);
            t_meta.push(SampleMeta {
                identity: Some(target_id),
                camera: Some(0),
                domain: DomainTag::Target,
            });
            expected.push(target_id);
        }
        let (dx, dy) = drift_centers[id];
        for _ in 0..drift_per_id {
            t_feat.push((dx + sigma * rng.next_gauss()) as f32);
            t_feat.push((dy + sigma * rng.next_gauss()) as f32);
            t_meta.push(SampleMeta {
                identity: Some(target_id),
                camera: Some(1),
                domain: DomainTag::Target,
            });
            expected.push(target_id);
        }
    }
    let target = EmbeddingSet::new("toy-target", t_meta.len(), 2, t_feat, t_meta)
        .expect("toy target construction");
    (source, target, expected)
}

/// Splits a labeled set into a retrieval protocol: queries are the samples
/// seen by `query_camera`, the gallery is the full set (per-query junk
/// exclusion removes each query's own same-camera entries).
pub fn split_query_gallery(
    set: &EmbeddingSet,
    query_camera: i64,
) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let query_idx: Vec<usize> = set
        .meta()
        .iter()
        .enumerate()
        .filter(|(_, m)| m.camera == Some(query_camera))
        .map(|(i, _)| i)
        .collect();
    if query_idx.is_empty() {
        return Err(Error::InvalidParam {
            field: "query_camera",
            reason: format!("no samples carry camera {query_camera}"),
        });
    }
    let query = set.select(format!("{}-query", set.name()), &query_idx)?;
    let all: Vec<usize> = (0..set.len()).collect();
    let gallery = set.select(format!("{}-gallery", set.name()), &all)?;
    Ok((query, gallery))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::sq_dist;

    #[test]
    fn generation_is_bitwise_deterministic() {
        let spec = SynthSpec::reference();
        let (s1, t1) = gen_domains(&spec).unwrap();
        let (s2, t2) = gen_domains(&spec).unwrap();
        assert_eq!(s1.features_raw(), s2.features_raw());
        assert_eq!(t1.features_raw(), t2.features_raw());
        assert_eq!(s1.meta(), s2.meta());
    }

    #[test]
    fn identity_ranges_are_disjoint() {
        let spec = SynthSpec::reference();
        let (s, t) = gen_domains(&spec).unwrap();
        let max_source = s.identities().iter().flatten().copied().max().unwrap();
        let min_target = t.identities().iter().flatten().copied().min().unwrap();
        assert!(max_source < min_target);
    }

    #[test]
    fn identity_shift_matches_source_geometry() {
        // with no rotation/translation/offsets both domains come from the
        // same generating process
        let spec = SynthSpec {
            shift: DomainShift::none(),
            ..SynthSpec::reference()
        };
        let (s, t) = gen_domains(&spec).unwrap();
        assert_eq!(s.len(), t.len());
        assert_eq!(s.dim(), t.dim());
        // per-id scatter has the same scale by construction
        let scatter = |set: &EmbeddingSet| {
            let f = set.to_features();
            let mut acc = 0.0;
            let per = spec.samples_per_id;
            for id in 0..spec.num_ids_source {
                let base = id * per;
                for a in base..base + per {
                    for b in (a + 1)..base + per {
                        acc += sq_dist(f.row(a), f.row(b)).sqrt();
                    }
                }
            }
            acc / (spec.num_ids_source * per * (per - 1) / 2) as f64
        };
        let (ss, ts) = (scatter(&s), scatter(&t));
        assert!((ss - ts).abs() / ss < 0.1, "scatter {ss} vs {ts}");
    }

    #[test]
    fn rotation_matrix_is_orthogonal() {
        let q = random_orthogonal(8, 3);
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = q[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum();
                let expect = (i == j) as usize as f64;
                assert!((dot - expect).abs() < 1e-10, "({i},{j}) dot {dot}");
            }
        }
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = SynthSpec {
            cameras: 1,
            ..SynthSpec::reference()
        };
        assert!(matches!(gen_domains(&spec), Err(Error::InvalidSpec { .. })));
    }

    #[test]
    fn toy_easy_points_sit_near_source() {
        let (source, target, expected) = gen_weight_ratio_toy(11);
        assert_eq!(target.len(), expected.len());
        let sf = source.to_features();
        let tf = target.to_features();
        // easy points are the camera-0 samples by construction
        for (i, m) in target.meta().iter().enumerate() {
            if m.camera != Some(0) {
                continue;
            }
            let mut best = f64::INFINITY;
            for s in 0..source.len() {
                best = best.min(sq_dist(tf.row(i), sf.row(s)).sqrt());
            }
            assert!(best <= 3.0 * 0.2, "easy point {i} is {best} from the source");
        }
    }

    #[test]
    fn toy_is_deterministic() {
        let (s1, t1, e1) = gen_weight_ratio_toy(5);
        let (s2, t2, e2) = gen_weight_ratio_toy(5);
        assert_eq!(s1.features_raw(), s2.features_raw());
        assert_eq!(t1.features_raw(), t2.features_raw());
        assert_eq!(e1, e2);
    }

    #[test]
    fn query_gallery_split() {
        let spec = SynthSpec::reference();
        let (_, t) = gen_domains(&spec).unwrap();
        let (query, gallery) = split_query_gallery(&t, 0).unwrap();
        assert_eq!(gallery.len(), t.len());
        assert!(query.len() > 0);
        assert!(query.meta().iter().all(|m| m.camera == Some(0)));
    }
}
