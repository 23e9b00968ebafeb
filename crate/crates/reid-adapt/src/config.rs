//! Adaptation hyperparameters, validation, and the flat `key = value`
//! config-file format used by the CLI and the C API.

use crate::error::{Error, Result};

/// Which metric the pseudo-labeling step clusters on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricMode {
    /// Plain Euclidean distance between encoded features.
    EuclideanBaseline,
    /// k-reciprocal robust sets -> kernelized rows -> Jaccard distance.
    KReciprocal,
    /// Jaccard distance between plain k-nearest-neighbour sets.
    PlainJaccard,
}

impl MetricMode {
    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "euclidean" => Some(MetricMode::EuclideanBaseline),
            "kreciprocal" => Some(MetricMode::KReciprocal),
            "jaccard" => Some(MetricMode::PlainJaccard),
            _ => None,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            MetricMode::EuclideanBaseline => "euclidean",
            MetricMode::KReciprocal => "kreciprocal",
            MetricMode::PlainJaccard => "jaccard",
        }
    }
}

/// All hyperparameters of the adaptation loop.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    /// Blend weight between the Jaccard distance and the confidence terms,
    /// in `[0, 1]`.
    pub balance_lambda: f64,
    /// Fraction of the pair pool averaged into the clustering threshold,
    /// in `(0, 1)`.
    pub percentage_p: f64,
    /// DBSCAN `minPts`.
    pub min_cluster_n1: usize,
    /// Number of self-training iterations.
    pub iterations_n2: usize,
    /// Neighbourhood size for the k-reciprocal robust sets (>= 2).
    pub reciprocal_k: usize,
    pub metric_mode: MetricMode,
    /// Blend the source-proximity confidence into the distance.
    pub use_dw: bool,
    pub triplet_margin: f64,
    pub learning_rate: f64,
    pub epochs_per_iter: usize,
    /// Identities per PK batch.
    pub pk_p: usize,
    /// Samples per identity per PK batch.
    pub pk_k: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            balance_lambda: 0.1,
            // The percentage controls how many pairs the clustering
            // threshold averages. It has to scale with the pair pool: at
            // desk-scale sample counts (hundreds of samples) the DBSCAN
            // neighbourhood graph needs p * n(n-1)/2 to give every sample a
            // few under-threshold neighbours, so the default is far larger
            // than the value tuned for datasets of ~10^4 images.
            percentage_p: 0.04,
            min_cluster_n1: 4,
            iterations_n2: 20,
            reciprocal_k: 20,
            metric_mode: MetricMode::KReciprocal,
            use_dw: true,
            triplet_margin: 0.3,
            learning_rate: 0.05,
            epochs_per_iter: 5,
            pk_p: 8,
            pk_k: 4,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    /// PK batch size.
    pub fn batch_size(&self) -> usize {
        self.pk_p * self.pk_k
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParam {
        field,
        reason: reason.into(),
    }
}

/// Checks every bound on [`AdaptConfig`]; returns the first violation.
pub fn validate_config(cfg: &AdaptConfig) -> Result<()> {
    if !(0.0..=1.0).contains(&cfg.balance_lambda) || !cfg.balance_lambda.is_finite() {
        return Err(invalid(
            "balance_lambda",
            format!("must be in [0, 1], got {}", cfg.balance_lambda),
        ));
    }
    if !(cfg.percentage_p > 0.0 && cfg.percentage_p < 1.0) {
        return Err(invalid(
            "percentage_p",
            format!("must be in (0, 1), got {}", cfg.percentage_p),
        ));
    }
    if cfg.min_cluster_n1 < 1 {
        return Err(invalid("min_cluster_n1", "must be >= 1"));
    }
    if cfg.iterations_n2 < 1 {
        return Err(invalid("iterations_n2", "must be >= 1"));
    }
    if cfg.reciprocal_k < 2 {
        return Err(invalid("reciprocal_k", "must be >= 2"));
    }
    if !(cfg.triplet_margin >= 0.0 && cfg.triplet_margin.is_finite()) {
        return Err(invalid(
            "triplet_margin",
            format!("must be finite and >= 0, got {}", cfg.triplet_margin),
        ));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(invalid(
            "learning_rate",
            format!("must be finite and > 0, got {}", cfg.learning_rate),
        ));
    }
    if cfg.epochs_per_iter < 1 {
        return Err(invalid("epochs_per_iter", "must be >= 1"));
    }
    if cfg.pk_p < 2 {
        return Err(invalid("pk_p", "must be >= 2"));
    }
    if cfg.pk_k < 2 {
        return Err(invalid("pk_k", "must be >= 2"));
    }
    Ok(())
}

/// Applies one `key = value` assignment. Unknown keys are errors.
pub fn apply_config_key(cfg: &mut AdaptConfig, key: &str, value: &str) -> Result<()> {
    fn bad<T>(field: &'static str, value: &str) -> Result<T> {
        Err(invalid(field, format!("cannot parse value `{value}`")))
    }
    match key {
        "balance_lambda" => {
            cfg.balance_lambda = value.parse().or_else(|_| bad("balance_lambda", value))?
        }
        "percentage_p" => cfg.percentage_p = value.parse().or_else(|_| bad("percentage_p", value))?,
        "min_cluster_n1" => {
            cfg.min_cluster_n1 = value.parse().or_else(|_| bad("min_cluster_n1", value))?
        }
        "iterations_n2" => {
            cfg.iterations_n2 = value.parse().or_else(|_| bad("iterations_n2", value))?
        }
        "reciprocal_k" => cfg.reciprocal_k = value.parse().or_else(|_| bad("reciprocal_k", value))?,
        "metric_mode" => {
            cfg.metric_mode = MetricMode::parse(value).ok_or_else(|| {
                invalid(
                    "metric_mode",
                    format!("expected euclidean|kreciprocal|jaccard, got `{value}`"),
                )
            })?
        }
        "use_dw" => {
            cfg.use_dw = match value {
                "true" | "1" => true,
                "false" | "0" => false,
                _ => return bad("use_dw", value),
            }
        }
        "triplet_margin" => {
            cfg.triplet_margin = value.parse().or_else(|_| bad("triplet_margin", value))?
        }
        "learning_rate" => {
            cfg.learning_rate = value.parse().or_else(|_| bad("learning_rate", value))?
        }
        "epochs_per_iter" => {
            cfg.epochs_per_iter = value.parse().or_else(|_| bad("epochs_per_iter", value))?
        }
        "pk_p" => cfg.pk_p = value.parse().or_else(|_| bad("pk_p", value))?,
        "pk_k" => cfg.pk_k = value.parse().or_else(|_| bad("pk_k", value))?,
        "seed" => cfg.seed = value.parse().or_else(|_| bad("seed", value))?,
        _ => {
            return Err(Error::InvalidSpec {
                line: None,
                reason: format!("unknown config key `{key}`"),
            })
        }
    }
    Ok(())
}

/// Parses a flat `key = value` config file on top of the defaults.
///
/// Blank lines and `#` comments are skipped; unknown keys fail fast with the
/// offending line number. The result is validated before it is returned.
pub fn parse_config(text: &str) -> Result<AdaptConfig> {
    let mut cfg = AdaptConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::InvalidSpec {
            line: Some(lineno + 1),
            reason: format!("expected `key = value`, got `{line}`"),
        })?;
        apply_config_key(&mut cfg, key.trim(), value.trim()).map_err(|e| match e {
            Error::InvalidSpec { reason, .. } => Error::InvalidSpec {
                line: Some(lineno + 1),
                reason,
            },
            other => other,
        })?;
    }
    validate_config(&cfg)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = AdaptConfig::default();
        assert_eq!(cfg.balance_lambda, 0.1);
        assert_eq!(cfg.min_cluster_n1, 4);
        assert_eq!(cfg.iterations_n2, 20);
        validate_config(&cfg).unwrap();
    }

    #[test]
    fn large_scale_parameters_validate() {
        // the parameter set used for ~10^4-image datasets
        let cfg = AdaptConfig {
            balance_lambda: 0.1,
            percentage_p: 1.6e-3,
            min_cluster_n1: 4,
            iterations_n2: 20,
            ..Default::default()
        };
        validate_config(&cfg).unwrap();
    }

    #[test]
    fn rejects_lambda_out_of_range() {
        let cfg = AdaptConfig {
            balance_lambda: 1.5,
            ..Default::default()
        };
        let err = validate_config(&cfg).unwrap_err();
        match err {
            Error::InvalidParam { field, .. } => assert_eq!(field, "balance_lambda"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_zero_p() {
        let cfg = AdaptConfig {
            percentage_p: 0.0,
            ..Default::default()
        };
        let err = validate_config(&cfg).unwrap_err();
        match err {
            Error::InvalidParam { field, .. } => assert_eq!(field, "percentage_p"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parses_file_and_rejects_unknown_key() {
        let cfg = parse_config("balance_lambda = 0.2\nseed = 7\n# comment\n").unwrap();
        assert_eq!(cfg.balance_lambda, 0.2);
        assert_eq!(cfg.seed, 7);

        let err = parse_config("nonsense = 1\n").unwrap_err();
        match err {
            Error::InvalidSpec { line, .. } => assert_eq!(line, Some(1)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
