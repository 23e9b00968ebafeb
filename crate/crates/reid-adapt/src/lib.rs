//! Self-training domain adaptation for re-identification embeddings.
//!
//! The crate works on precomputed embedding vectors (no image decoding, no
//! deep backbone): a labeled source domain and an unlabeled target domain.
//! An encoder is first trained on the source with triplet + softmax losses,
//! then refined by iterating:
//!
//! 1. encode all target samples,
//! 2. build a contextual distance: k-reciprocal robust sets, kernelized
//!    neighbour rows and their Jaccard distance ([`metric`]), optionally
//!    blended with a per-sample source-proximity confidence,
//! 3. pick a data-driven threshold and run DBSCAN over the matrix
//!    ([`cluster`]) to guess pseudo-identities,
//! 4. refine the encoder with batch-hard triplet loss on the guesses
//!    ([`encoder`], [`losses`]).
//!
//! [`selftrain::run_adaptation`] drives the whole loop and records one
//! diagnostic report per iteration. [`eval`] implements the retrieval
//! protocol (CMC / mAP with junk exclusion), clustering agreement (ARI) and
//! a nearest-neighbour pair-risk probe. [`synth`] generates the
//! deterministic benchmark domains used by the test-suite and the CLI.
//!
//! Everything is bitwise deterministic given a seed: randomness flows from a
//! single [`rng::SplitMix64`] stream, parallel code only splits work in ways
//! that cannot reorder floating-point reductions, and all file formats are
//! little-endian binary or round-trip decimal text.

pub mod cluster;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod mat;
pub mod metric;
pub mod rng;
pub mod selftrain;
pub mod synth;

pub use config::{AdaptConfig, MetricMode};
pub use data::{DistanceKind, DistanceMatrix, DomainTag, EmbeddingSet, SampleMeta};
pub use error::{Error, Result};
