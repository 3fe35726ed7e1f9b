//! Failure-probability estimators: gradient-boosted trees, a random forest
//! and a logistic baseline behind one serializable type.

mod boosted;
mod forest;
mod logistic;
pub mod metrics;
pub mod tree;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::{FeatureVector, FEATURE_COUNT, FEATURE_NAMES};
use crate::numeric::{exact_sum, sigmoid};

pub use boosted::{train_boosted, BoostedParams};
pub use forest::{train_forest, ForestParams};
pub use logistic::{train_logistic, LogisticParams};
pub use metrics::{evaluate, EvalReport};
use tree::{Row, TreeNode};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("training data is empty")]
    EmptyData,
    #[error("non-finite feature value in training example {0}")]
    NonFiniteFeature(usize),
    #[error("invalid hyperparameter: {0}")]
    InvalidParams(String),
    #[error("unsupported estimator format_version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("feature order {0:?} does not match the canonical order")]
    FeatureOrderMismatch(Vec<String>),
    #[error("malformed estimator: {0}")]
    Malformed(String),
    #[error("estimator JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: FeatureVector,
    /// true when the Layer-1 aggregated answer was wrong.
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Boosted,
    Forest,
    Logistic,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorKind::Boosted => "boosted",
            EstimatorKind::Forest => "forest",
            EstimatorKind::Logistic => "logistic",
        })
    }
}

/// Fitted parameters, tagged by estimator kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Boosted {
        /// Log-odds of the training failure rate.
        base_score: f64,
        learning_rate: f64,
        max_depth: usize,
        trees: Vec<TreeNode>,
    },
    Forest {
        max_depth: usize,
        trees: Vec<TreeNode>,
    },
    Logistic {
        /// Per-feature centering applied before the linear model.
        means: [f64; FEATURE_COUNT],
        scales: [f64; FEATURE_COUNT],
        weights: [f64; FEATURE_COUNT],
        intercept: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    /// Boosting rounds, forest size, or solver iterations.
    pub rounds: usize,
    pub dataset_size: usize,
    pub positives: usize,
    /// All labels identical; the estimator is a constant.
    pub degenerate: bool,
    /// Mean training log-loss before the first round and after each round.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub training_loss: Vec<f64>,
}

/// A trained router. Immutable once built; safe to share across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEstimator {
    pub format_version: u32,
    #[serde(flatten)]
    pub model: Model,
    pub feature_order: Vec<String>,
    pub training_metadata: TrainingMetadata,
}

// Keeps standardized logistic inputs finite for extreme feature values.
const Z_LIMIT: f64 = 1e6;

impl FailureEstimator {
    pub(crate) fn new(model: Model, training_metadata: TrainingMetadata) -> Self {
        FailureEstimator {
            format_version: FORMAT_VERSION,
            model,
            feature_order: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            training_metadata,
        }
    }

    pub fn kind(&self) -> EstimatorKind {
        match self.model {
            Model::Boosted { .. } => EstimatorKind::Boosted,
            Model::Forest { .. } => EstimatorKind::Forest,
            Model::Logistic { .. } => EstimatorKind::Logistic,
        }
    }

    /// Probability that the Layer-1 aggregated answer is wrong, in [0, 1].
    pub fn predict_p_fail(&self, features: &FeatureVector) -> f64 {
        self.predict_row(&features.to_array())
    }

    pub fn predict_row(&self, x: &Row) -> f64 {
        let p = match &self.model {
            Model::Boosted {
                base_score,
                learning_rate,
                trees,
                ..
            } => {
                let margin: f64 = trees.iter().map(|t| t.predict(x)).sum();
                sigmoid(base_score + learning_rate * margin)
            }
            Model::Forest { trees, .. } => {
                exact_sum(trees.iter().map(|t| t.predict(x))) / trees.len().max(1) as f64
            }
            Model::Logistic {
                means,
                scales,
                weights,
                intercept,
            } => {
                let mut margin = *intercept;
                for j in 0..FEATURE_COUNT {
                    let z = (x[j] - means[j]) / scales[j];
                    let z = if z.is_nan() { 0.0 } else { z.clamp(-Z_LIMIT, Z_LIMIT) };
                    margin += weights[j] * z;
                }
                sigmoid(margin)
            }
        };
        if p.is_nan() {
            0.5
        } else {
            p.clamp(0.0, 1.0)
        }
    }

    /// Short content hash identifying this estimator in responses and logs.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("estimator serializes");
        let digest = Sha256::digest(&bytes);
        format!("{}-{}", self.kind(), hex::encode(&digest[..8]))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimator serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EstimatorError> {
        let est: FailureEstimator = serde_json::from_str(text)?;
        est.validate()?;
        Ok(est)
    }

    pub fn load(path: &Path) -> Result<Self, EstimatorError> {
        let text = std::fs::read_to_string(path).map_err(|source| EstimatorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if self.format_version != FORMAT_VERSION {
            return Err(EstimatorError::UnsupportedVersion(self.format_version));
        }
        if self.feature_order.iter().map(String::as_str).ne(FEATURE_NAMES) {
            return Err(EstimatorError::FeatureOrderMismatch(self.feature_order.clone()));
        }
        let malformed = EstimatorError::Malformed;
        match &self.model {
            Model::Boosted {
                base_score,
                learning_rate,
                max_depth,
                trees,
            } => {
                if !base_score.is_finite() || !(*learning_rate > 0.0 && learning_rate.is_finite()) {
                    return Err(malformed("base_score and learning_rate must be finite, learning_rate > 0".into()));
                }
                trees.iter().try_for_each(|t| t.validate(*max_depth)).map_err(malformed)
            }
            Model::Forest { max_depth, trees } => {
                if trees.is_empty() {
                    return Err(malformed("forest has no trees".into()));
                }
                trees.iter().try_for_each(|t| t.validate(*max_depth)).map_err(malformed)?;
                let mut leaves = Vec::new();
                trees.iter().for_each(|t| collect_leaves(t, &mut leaves));
                if leaves.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(malformed("forest leaf outside [0,1]".into()));
                }
                Ok(())
            }
            Model::Logistic {
                means,
                scales,
                weights,
                intercept,
            } => {
                let all_finite = means.iter().chain(weights).chain(std::iter::once(intercept)).all(|v| v.is_finite());
                if !all_finite || scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                    return Err(malformed("logistic parameters must be finite with positive scales".into()));
                }
                Ok(())
            }
        }
    }
}

fn collect_leaves(t: &TreeNode, out: &mut Vec<f64>) {
    match t {
        TreeNode::Leaf(v) => out.push(*v),
        TreeNode::Split(_, _, l, r) => {
            collect_leaves(l, out);
            collect_leaves(r, out);
        }
    }
}

// Shared preamble for all trainers.
pub(crate) fn unpack(data: &[LabeledExample]) -> Result<(Vec<Row>, Vec<bool>), EstimatorError> {
    if data.is_empty() {
        return Err(EstimatorError::EmptyData);
    }
    let rows: Vec<Row> = data.iter().map(|e| e.features.to_array()).collect();
    if let Some(i) = rows.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(EstimatorError::NonFiniteFeature(i));
    }
    Ok((rows, data.iter().map(|e| e.label).collect()))
}

pub(crate) fn mean_log_loss(probs: &[f64], labels: &[bool]) -> f64 {
    const EPS: f64 = 1e-15;
    let losses = probs.iter().zip(labels).map(|(&p, &y)| {
        let p = p.clamp(EPS, 1.0 - EPS);
        if y {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        }
    });
    exact_sum(losses) / probs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn constant_forest(value: f64) -> FailureEstimator {
        FailureEstimator::new(
            Model::Forest {
                max_depth: 1,
                trees: vec![TreeNode::Leaf(value); 4],
            },
            TrainingMetadata {
                seed: 0,
                rounds: 4,
                dataset_size: 0,
                positives: 0,
                degenerate: false,
                training_loss: vec![],
            },
        )
    }

    #[test]
    fn forest_of_identical_leaves_predicts_leaf_value() {
        let est = constant_forest(0.3);
        assert_eq!(est.predict_row(&[0.0; 6]), 0.3);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let est = constant_forest(0.3);
        let json = est.to_json();
        assert!(json.contains("\"format_version\": 1"));
        assert!(json.contains("\"kind\": \"forest\""));
        let back = FailureEstimator::from_json(&json).unwrap();
        assert_eq!(back, est);
        assert_eq!(back.fingerprint(), est.fingerprint());

        let bumped = json.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(
            FailureEstimator::from_json(&bumped),
            Err(EstimatorError::UnsupportedVersion(2))
        ));
        let reordered = json.replace("\"exact_agreement\"", "\"something_else\"");
        assert!(matches!(
            FailureEstimator::from_json(&reordered),
            Err(EstimatorError::FeatureOrderMismatch(_))
        ));
    }

    #[test]
    fn empty_and_non_finite_training_data() {
        assert!(matches!(unpack(&[]), Err(EstimatorError::EmptyData)));
        let bad = LabeledExample {
            features: FeatureVector::from_array([f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]),
            label: true,
        };
        assert!(matches!(unpack(&[bad]), Err(EstimatorError::NonFiniteFeature(0))));
    }
}
