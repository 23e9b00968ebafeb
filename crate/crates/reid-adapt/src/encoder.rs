//! The trainable encoder: an affine (optionally one-hidden-layer) map over
//! input embeddings, trained on the source domain with triplet + softmax
//! losses and refined on target pseudo-labels with the triplet loss alone.
//!
//! Training is plain SGD with momentum 0.9 over PK-sampled batches. The
//! batch schedule is single-threaded and consumes one RNG stream, so a run
//! is bitwise reproducible from its seed.

use rayon::prelude::*;

use crate::cluster::ClusterAssignment;
use crate::config::AdaptConfig;
use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::losses::{softmax_ce, triplet_batch_hard, TripletBatch};
use crate::mat::Mat;
use crate::rng::SplitMix64;

const MOMENTUM: f64 = 0.9;

/// The source phase trains triplet + classifier jointly; the classifier
/// term keeps growing the embedding scale long after the triplet is
/// satisfied, which would push the kernelized distances out of their
/// informative range. Source training therefore runs at a reduced step
/// size relative to `cfg.learning_rate` (the refinement rate).
const SOURCE_LR_FACTOR: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

/// A stack of affine layers with an optional activation between them (never
/// after the last layer).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    layers: Vec<(Mat, Vec<f64>)>,
    activation: Activation,
}

impl EncoderModel {
    /// Single affine layer with uniform `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`
    /// init, weights row by row, then the bias.
    pub fn affine(d_in: usize, d_out: usize, rng: &mut SplitMix64) -> Self {
        let layers = vec![init_layer(d_in, d_out, rng)];
        EncoderModel {
            layers,
            activation: Activation::None,
        }
    }

    /// One hidden layer: `d_in -> hidden -> d_out`.
    pub fn with_hidden(
        d_in: usize,
        hidden: usize,
        d_out: usize,
        activation: Activation,
        rng: &mut SplitMix64,
    ) -> Self {
        let layers = vec![init_layer(d_in, hidden, rng), init_layer(hidden, d_out, rng)];
        EncoderModel { layers, activation }
    }

    /// Identity map (square weights, zero bias): handy as a fixed encoder.
    pub fn identity(d: usize) -> Self {
        let mut w = Mat::zeros(d, d);
        for i in 0..d {
            w.set(i, i, 1.0);
        }
        EncoderModel {
            layers: vec![(w, vec![0.0; d])],
            activation: Activation::None,
        }
    }

    /// Rebuilds a model from raw layers, validating the shape chain,
    /// parameter finiteness, and the `d_out >= 2` contract.
    pub fn from_layers(layers: Vec<(Mat, Vec<f64>)>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParam {
                field: "layers",
                reason: "a model needs at least one layer".into(),
            });
        }
        for (l, (w, b)) in layers.iter().enumerate() {
            if b.len() != w.rows() {
                return Err(Error::SizeMismatch {
                    detail: format!("layer {l}: bias length {} != rows {}", b.len(), w.rows()),
                });
            }
            if l > 0 && w.cols() != layers[l - 1].0.rows() {
                return Err(Error::SizeMismatch {
                    detail: format!(
                        "layer {l}: input dim {} != previous output {}",
                        w.cols(),
                        layers[l - 1].0.rows()
                    ),
                });
            }
            if !w.is_finite() || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParam {
                    field: "layers",
                    reason: format!("layer {l} holds non-finite parameters"),
                });
            }
        }
        let model = EncoderModel { layers, activation };
        if model.d_out() < 2 {
            return Err(Error::InvalidParam {
                field: "layers",
                reason: "output dimension must be >= 2".into(),
            });
        }
        Ok(model)
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].0.cols()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().unwrap().0.rows()
    }

    pub fn layers(&self) -> &[(Mat, Vec<f64>)] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Deterministic forward pass over all rows (row-parallel, fixed per-row
    /// reduction order).
    pub fn encode(&self, input: &Mat) -> Result<Mat> {
        if input.cols() != self.d_in() {
            return Err(Error::DimensionMismatch {
                detail: format!("input dimension {} != model d_in {}", input.cols(), self.d_in()),
            });
        }
        let mut h = input.clone();
        let last = self.layers.len() - 1;
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let mut z = linear_forward(&h, w, b);
            if l < last && self.activation == Activation::Relu {
                for v in z.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            h = z;
        }
        for r in 0..h.rows() {
            for (c, v) in h.row(r).iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteOutput { row: r, col: c });
                }
            }
        }
        Ok(h)
    }

    /// Encodes an embedding set (features promoted to `f64`).
    pub fn encode_set(&self, set: &EmbeddingSet) -> Result<Mat> {
        self.encode(&set.to_features())
    }

    fn forward_cached(&self, input: &Mat) -> ForwardPass {
        let last = self.layers.len() - 1;
        let mut hs = vec![input.clone()];
        let mut zs = Vec::with_capacity(self.layers.len());
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let z = linear_forward(hs.last().unwrap(), w, b);
            zs.push(z.clone());
            let mut h = z;
            if l < last && self.activation == Activation::Relu {
                for v in h.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            hs.push(h);
        }
        ForwardPass { zs, hs }
    }

    /// Gradients of the loss w.r.t. every layer, given the gradient at the
    /// output. Layout matches `layers()`.
    fn backward(&self, pass: &ForwardPass, g_out: &Mat) -> Vec<(Mat, Vec<f64>)> {
        let mut grads = vec![(Mat::zeros(0, 0), Vec::new()); self.layers.len()];
        let mut g = g_out.clone();
        for l in (0..self.layers.len()).rev() {
            let h_prev = &pass.hs[l];
            let (w, _) = &self.layers[l];
            let dw = matmul_t_a(&g, h_prev);
            let db = column_sums(&g);
            if l > 0 {
                let mut g_prev = matmul(&g, w);
                if self.activation == Activation::Relu {
                    let z = &pass.zs[l - 1];
                    for (gp, zv) in g_prev.data_mut().iter_mut().zip(z.data()) {
                        if *zv <= 0.0 {
                            *gp = 0.0;
                        }
                    }
                }
                g = g_prev;
            }
            grads[l] = (dw, db);
        }
        grads
    }
}

struct ForwardPass {
    zs: Vec<Mat>,
    hs: Vec<Mat>,
}

fn init_layer(d_in: usize, d_out: usize, rng: &mut SplitMix64) -> (Mat, Vec<f64>) {
    let bound = 1.0 / (d_in as f64).sqrt();
    let mut w = Mat::zeros(d_out, d_in);
    for v in w.data_mut() {
        *v = rng.next_range(-bound, bound);
    }
    let b: Vec<f64> = (0..d_out).map(|_| rng.next_range(-bound, bound)).collect();
    (w, b)
}

/// `h (n x d_in) * w^T (d_in x d_out) + b`, row-parallel.
fn linear_forward(h: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let n = h.rows();
    let d_out = w.rows();
    let mut out = Mat::zeros(n, d_out);
    out.par_rows_mut().enumerate().for_each(|(i, row)| {
        let hi = h.row(i);
        for (o, slot) in row.iter_mut().enumerate() {
            let wr = w.row(o);
            let mut acc = b[o];
            for k in 0..hi.len() {
                acc += hi[k] * wr[k];
            }
            *slot = acc;
        }
    });
    out
}

/// `a^T (cols_a x n) * b (n x cols_b)` -> `cols_a x cols_b`.
fn matmul_t_a(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.cols(), b.cols());
    for i in 0..a.cols() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for r in 0..a.rows() {
                acc += a.get(r, i) * b.get(r, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

fn column_sums(g: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (c, v) in g.row(r).iter().enumerate() {
            out[c] += v;
        }
    }
    out
}

/// SGD-with-momentum state over a flat list of (weight, bias) parameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub rng_seed: u64,
    velocity: Vec<(Mat, Vec<f64>)>,
}

impl OptimState {
    pub fn new(learning_rate: f64, momentum: f64, rng_seed: u64, params: &[(Mat, Vec<f64>)]) -> Self {
        let velocity = params
            .iter()
            .map(|(w, b)| (Mat::zeros(w.rows(), w.cols()), vec![0.0; b.len()]))
            .collect();
        OptimState {
            learning_rate,
            momentum,
            rng_seed,
            velocity,
        }
    }

    /// `v <- momentum * v + g`, `p <- p - lr * v`.
    pub fn step(&mut self, params: &mut [(Mat, Vec<f64>)], grads: &[(Mat, Vec<f64>)]) {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, gv), vv) in p
                .0
                .data_mut()
                .iter_mut()
                .zip(g.0.data())
                .zip(v.0.data_mut())
            {
                *vv = self.momentum * *vv + gv;
                *pv -= self.learning_rate * *vv;
            }
            for ((pv, gv), vv) in p.1.iter_mut().zip(&g.1).zip(v.1.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.learning_rate * *vv;
            }
        }
    }
}

/// Draws a PK batch: `p` groups without replacement, `k` members each
/// (distinct when the group is large enough, with replacement otherwise).
/// Returns sample indices in draw order.
pub fn pk_sample(
    groups: &[Vec<usize>],
    p: usize,
    k: usize,
    rng: &mut SplitMix64,
) -> Result<Vec<usize>> {
    let usable: Vec<&Vec<usize>> = groups.iter().filter(|g| !g.is_empty()).collect();
    if usable.len() < p {
        return Err(Error::TooFewIdentities {
            have: usable.len(),
            need: p,
        });
    }
    let chosen = rng.choose_distinct(usable.len(), p);
    let mut batch = Vec::with_capacity(p * k);
    for g in chosen {
        let members = usable[g];
        if members.len() >= k {
            for pick in rng.choose_distinct(members.len(), k) {
                batch.push(members[pick]);
            }
        } else {
            for _ in 0..k {
                batch.push(members[rng.next_index(members.len())]);
            }
        }
    }
    Ok(batch)
}

/// Per-identity member lists for a fully labeled set, identities ascending.
pub fn groups_from_identities(set: &EmbeddingSet) -> Result<Vec<Vec<usize>>> {
    let mut ids: Vec<i64> = Vec::new();
    for (i, m) in set.meta().iter().enumerate() {
        match m.identity {
            Some(id) => {
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
            None => {
                return Err(Error::InvalidParam {
                    field: "source",
                    reason: format!("sample {i} is unlabeled; source training needs identities"),
                })
            }
        }
    }
    ids.sort_unstable();
    let groups = ids
        .iter()
        .map(|&id| {
            set.meta()
                .iter()
                .enumerate()
                .filter(|(_, m)| m.identity == Some(id))
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    Ok(groups)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainStats {
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
}

/// Trains the encoder on the fully labeled source set: PK batches, triplet
/// loss on the encoded features plus softmax cross-entropy through a linear
/// classifier head, the two added directly.
pub fn train_source(
    model: EncoderModel,
    source: &EmbeddingSet,
    cfg: &AdaptConfig,
    rng: &mut SplitMix64,
) -> Result<(EncoderModel, TrainStats)> {
    let groups = groups_from_identities(source)?;
    if groups.len() < cfg.pk_p {
        return Err(Error::TooFewIdentities {
            have: groups.len(),
            need: cfg.pk_p,
        });
    }
    let source_cfg = AdaptConfig {
        learning_rate: cfg.learning_rate * SOURCE_LR_FACTOR,
        ..cfg.clone()
    };
    train_pk(model, &source.to_features(), &groups, &source_cfg, true, rng)
}

/// Refines the encoder on target pseudo-labels: noise excluded, clusters as
/// identities, triplet loss only.
pub fn refine_target(
    model: EncoderModel,
    target: &EmbeddingSet,
    assignment: &ClusterAssignment,
    cfg: &AdaptConfig,
    rng: &mut SplitMix64,
) -> Result<(EncoderModel, TrainStats)> {
    if assignment.len() != target.len() {
        return Err(Error::SizeMismatch {
            detail: format!(
                "{} assignment entries for {} target samples",
                assignment.len(),
                target.len()
            ),
        });
    }
    let groups = assignment.members();
    if groups.len() < cfg.pk_p {
        return Err(Error::TooFewIdentities {
            have: groups.len(),
            need: cfg.pk_p,
        });
    }
    train_pk(model, &target.to_features(), &groups, cfg, false, rng)
}

fn train_pk(
    mut model: EncoderModel,
    inputs: &Mat,
    groups: &[Vec<usize>],
    cfg: &AdaptConfig,
    with_ce_head: bool,
    rng: &mut SplitMix64,
) -> Result<(EncoderModel, TrainStats)> {
    let mut label_of = vec![usize::MAX; inputs.rows()];
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            label_of[i] = g;
        }
    }
    // One epoch draws as many PK batches as fit the full dataset, so a
    // sparsely-labeled round still trains at full strength (the batches
    // oversample the labeled subset).
    let steps_per_epoch = (inputs.rows() / cfg.batch_size()).max(1);

    let mut head: Option<(Mat, Vec<f64>)> = if with_ce_head {
        Some(init_layer(model.d_out(), groups.len(), rng))
    } else {
        None
    };
    let n_layers = model.layers.len();
    let mut velocity_params: Vec<(Mat, Vec<f64>)> = model.layers.clone();
    if let Some(h) = &head {
        velocity_params.push(h.clone());
    }
    let mut optim = OptimState::new(cfg.learning_rate, MOMENTUM, cfg.seed, &velocity_params);

    let mut first_epoch_loss = 0.0;
    let mut last_epoch_loss = 0.0;
    for epoch in 0..cfg.epochs_per_iter {
        let mut epoch_loss = 0.0;
        for step in 0..steps_per_epoch {
            let batch_idx = pk_sample(groups, cfg.pk_p, cfg.pk_k, rng)?;
            let labels: Vec<usize> = batch_idx.iter().map(|&i| label_of[i]).collect();
            let x = inputs.gather_rows(&batch_idx);
            let pass = model.forward_cached(&x);
            let encoded = pass.hs.last().unwrap();

            let (triplet_loss, mut g_enc) = triplet_batch_hard(&TripletBatch {
                features: encoded.clone(),
                labels: labels.clone(),
                margin: cfg.triplet_margin,
            })?;
            let mut total = triplet_loss;
            let mut head_grad: Option<(Mat, Vec<f64>)> = None;
            if let Some((wh, bh)) = &head {
                let logits = linear_forward(encoded, wh, bh);
                let (ce_loss, g_logits) = softmax_ce(&logits, &labels)?;
                total += ce_loss;
                let g_from_ce = matmul(&g_logits, wh);
                for (a, b) in g_enc.data_mut().iter_mut().zip(g_from_ce.data()) {
                    *a += b;
                }
                head_grad = Some((matmul_t_a(&g_logits, encoded), column_sums(&g_logits)));
            }
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }

            let mut grads = model.backward(&pass, &g_enc);
            let mut params = std::mem::take(&mut model.layers);
            let had_head = head.is_some();
            if had_head {
                params.push(head.take().expect("head present"));
                grads.push(head_grad.expect("head gradient present"));
            }
            optim.step(&mut params, &grads);
            if had_head {
                head = params.pop();
            }
            debug_assert_eq!(params.len(), n_layers);
            model.layers = params;
            epoch_loss += total;
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        if epoch == 0 {
            first_epoch_loss = mean;
        }
        last_epoch_loss = mean;
        log::debug!("epoch {epoch}: mean batch loss {mean}");
    }
    Ok((
        model,
        TrainStats {
            first_epoch_loss,
            last_epoch_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DomainTag, SampleMeta};

    fn labeled_set(points: &[(f64, f64)], ids: &[i64]) -> EmbeddingSet {
        let features: Vec<f32> = points
            .iter()
            .flat_map(|&(x, y)| [x as f32, y as f32])
            .collect();
        let meta = ids
            .iter()
            .map(|&id| SampleMeta {
                identity: Some(id),
                camera: Some(0),
                domain: DomainTag::Source,
            })
            .collect();
        EmbeddingSet::new("fixture", points.len(), 2, features, meta).unwrap()
    }

    #[test]
    fn identity_model_is_identity() {
        let m = EncoderModel::identity(3);
        let x = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, -4.0, 0.5, 6.0]);
        assert_eq!(m.encode(&x).unwrap(), x);
    }

    #[test]
    fn hand_set_weights_match_hand_product() {
        let w = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let model = EncoderModel::from_layers(vec![(w, vec![0.5, -0.5])], Activation::None).unwrap();
        let x = Mat::from_vec(1, 2, vec![10.0, 20.0]);
        let y = model.encode(&x).unwrap();
        assert_eq!(y.row(0), &[1.0 * 10.0 + 2.0 * 20.0 + 0.5, 3.0 * 10.0 + 4.0 * 20.0 - 0.5]);
    }

    #[test]
    fn batch_encode_matches_per_sample_loop() {
        let mut rng = SplitMix64::new(5);
        let model = EncoderModel::with_hidden(4, 6, 3, Activation::Relu, &mut rng);
        let x = Mat::from_vec(100, 4, (0..400).map(|_| rng.next_gauss()).collect());
        let batch = model.encode(&x).unwrap();
        for i in 0..x.rows() {
            let single = model.encode(&x.gather_rows(&[i])).unwrap();
            assert_eq!(single.row(0), batch.row(i));
        }
    }

    #[test]
    fn encode_is_linear_without_bias_or_activation() {
        let mut rng = SplitMix64::new(17);
        let mut model = EncoderModel::affine(3, 3, &mut rng);
        for (_, b) in model.layers.iter_mut() {
            b.fill(0.0);
        }
        let u = Mat::from_vec(1, 3, vec![0.3, -1.2, 0.7]);
        let v = Mat::from_vec(1, 3, vec![2.0, 0.1, -0.4]);
        let (alpha, beta) = (2.5, -1.5);
        let combo = Mat::from_vec(
            1,
            3,
            (0..3)
                .map(|c| alpha * u.get(0, c) + beta * v.get(0, c))
                .collect(),
        );
        let eu = model.encode(&u).unwrap();
        let ev = model.encode(&v).unwrap();
        let ec = model.encode(&combo).unwrap();
        for c in 0..3 {
            let expect = alpha * eu.get(0, c) + beta * ev.get(0, c);
            assert!((ec.get(0, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = EncoderModel::identity(3);
        let x = Mat::zeros(1, 4);
        assert!(matches!(m.encode(&x), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn pk_sample_exact_fit_is_a_permutation() {
        let groups: Vec<Vec<usize>> = vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]];
        let mut rng = SplitMix64::new(1);
        let batch = pk_sample(&groups, 3, 3, &mut rng).unwrap();
        let mut sorted = batch.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn pk_sample_small_group_repeats() {
        let groups: Vec<Vec<usize>> = vec![vec![7], vec![1, 2]];
        let mut rng = SplitMix64::new(1);
        let batch = pk_sample(&groups, 2, 4, &mut rng).unwrap();
        assert_eq!(batch.iter().filter(|&&i| i == 7).count(), 4);
    }

    #[test]
    fn pk_sample_is_deterministic() {
        let groups: Vec<Vec<usize>> = (0..6).map(|g| (g * 5..g * 5 + 5).collect()).collect();
        let a = pk_sample(&groups, 4, 3, &mut SplitMix64::new(99)).unwrap();
        let b = pk_sample(&groups, 4, 3, &mut SplitMix64::new(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pk_sample_too_few_identities() {
        let groups: Vec<Vec<usize>> = vec![vec![0], vec![1]];
        let err = pk_sample(&groups, 3, 2, &mut SplitMix64::new(0)).unwrap_err();
        assert!(matches!(err, Error::TooFewIdentities { have: 2, need: 3 }));
    }

    fn four_blob_source(rng: &mut SplitMix64) -> EmbeddingSet {
        let centers = [(0.0, 0.0), (8.0, 0.0), (0.0, 8.0), (8.0, 8.0)];
        let mut points = Vec::new();
        let mut ids = Vec::new();
        for (id, &(cx, cy)) in centers.iter().enumerate() {
            for _ in 0..8 {
                points.push((cx + 0.2 * rng.next_gauss(), cy + 0.2 * rng.next_gauss()));
                ids.push(id as i64);
            }
        }
        labeled_set(&points, &ids)
    }

    fn small_cfg() -> AdaptConfig {
        AdaptConfig {
            pk_p: 4,
            pk_k: 2,
            epochs_per_iter: 20,
            learning_rate: 1e-2,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn train_source_reduces_loss_on_gaussian_fixture() {
        let mut rng = SplitMix64::new(42);
        let source = four_blob_source(&mut rng);
        let model = EncoderModel::affine(2, 2, &mut rng);
        let (_, stats) = train_source(model, &source, &small_cfg(), &mut rng).unwrap();
        assert!(
            stats.last_epoch_loss < stats.first_epoch_loss,
            "{} -> {}",
            stats.first_epoch_loss,
            stats.last_epoch_loss
        );
    }

    #[test]
    fn train_source_diverges_with_huge_learning_rate() {
        let mut rng = SplitMix64::new(42);
        let source = four_blob_source(&mut rng);
        let model = EncoderModel::affine(2, 2, &mut rng);
        let cfg = AdaptConfig {
            learning_rate: 1e6,
            ..small_cfg()
        };
        let err = train_source(model, &source, &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }));
    }

    #[test]
    fn train_source_deterministic_given_seed() {
        let run = || {
            let mut rng = SplitMix64::new(42);
            let source = four_blob_source(&mut rng);
            let model = EncoderModel::affine(2, 2, &mut rng);
            train_source(model, &source, &small_cfg(), &mut rng)
                .unwrap()
                .0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn refine_with_separated_clusters_at_slack_keeps_parameters() {
        // pseudo-clusters already beyond the margin: every hinge inactive,
        // every gradient zero, parameters unchanged bitwise
        let mut rng = SplitMix64::new(4);
        let points: Vec<(f64, f64)> = vec![
            (0.0, 0.0),
            (0.0, 0.01),
            (50.0, 0.0),
            (50.0, 0.01),
            (0.0, 50.0),
            (0.0, 50.01),
            (50.0, 50.0),
            (50.0, 50.01),
        ];
        let target = EmbeddingSet::unlabeled(
            "t",
            8,
            2,
            points.iter().flat_map(|&(x, y)| [x as f32, y as f32]).collect(),
            DomainTag::Target,
        )
        .unwrap();
        let assignment = ClusterAssignment {
            labels: (0..8).map(|i| Some(i / 2)).collect(),
            num_clusters: 4,
            core_flags: vec![true; 8],
        };
        let model = EncoderModel::identity(2);
        let cfg = AdaptConfig {
            pk_p: 4,
            pk_k: 2,
            epochs_per_iter: 3,
            ..Default::default()
        };
        let (trained, stats) = refine_target(model.clone(), &target, &assignment, &cfg, &mut rng).unwrap();
        assert_eq!(trained, model);
        assert_eq!(stats.last_epoch_loss, 0.0);
    }

    #[test]
    fn refine_rejects_single_cluster() {
        let target = EmbeddingSet::unlabeled("t", 4, 2, vec![0.0; 8], DomainTag::Target).unwrap();
        let assignment = ClusterAssignment {
            labels: vec![Some(0), Some(0), Some(0), None],
            num_clusters: 1,
            core_flags: vec![true; 4],
        };
        let cfg = AdaptConfig {
            pk_p: 4,
            pk_k: 2,
            ..Default::default()
        };
        let err = refine_target(
            EncoderModel::identity(2),
            &target,
            &assignment,
            &cfg,
            &mut SplitMix64::new(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::TooFewIdentities { .. }));
    }

    #[test]
    fn one_step_first_order_loss_decrease() {
        // one SGD step at tiny lr changes the loss by about -lr * ||g||^2
        let mut rng = SplitMix64::new(31);
        let model = EncoderModel::affine(3, 3, &mut rng);
        let x = Mat::from_vec(8, 3, (0..24).map(|_| rng.next_gauss()).collect());
        let labels: Vec<usize> = (0..8).map(|i| i / 2).collect();
        let loss_of = |m: &EncoderModel| {
            let enc = m.encode(&x).unwrap();
            triplet_batch_hard(&TripletBatch {
                features: enc,
                labels: labels.clone(),
                margin: 1.0,
            })
            .unwrap()
            .0
        };
        let base = loss_of(&model);
        let pass = model.forward_cached(&x);
        let (_, g_enc) = triplet_batch_hard(&TripletBatch {
            features: pass.hs.last().unwrap().clone(),
            labels: labels.clone(),
            margin: 1.0,
        })
        .unwrap();
        let grads = model.backward(&pass, &g_enc);
        let g_norm_sq: f64 = grads
            .iter()
            .map(|(w, b)| {
                w.data().iter().map(|v| v * v).sum::<f64>() + b.iter().map(|v| v * v).sum::<f64>()
            })
            .sum();
        assert!(g_norm_sq > 0.0, "fixture must have an active hinge");

        let lr = 1e-6;
        let mut stepped = model.clone();
        let mut optim = OptimState::new(lr, MOMENTUM, 0, &stepped.layers);
        let mut params = std::mem::take(&mut stepped.layers);
        optim.step(&mut params, &grads);
        stepped.layers = params;
        let after = loss_of(&stepped);
        let actual = base - after;
        let expected = lr * g_norm_sq;
        assert!(
            (actual - expected).abs() <= 0.2 * expected,
            "actual {actual}, expected {expected}"
        );
    }
}
