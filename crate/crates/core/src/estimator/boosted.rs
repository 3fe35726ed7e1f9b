use serde::{Deserialize, Serialize};

use super::tree::GradientTreeBuilder;
use super::{mean_log_loss, unpack, EstimatorError, FailureEstimator, LabeledExample, Model, TrainingMetadata};
use crate::numeric::{logit, sigmoid};

// Keeps the base score finite when every label is identical.
const RATE_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostedParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// Minimum hessian mass in each child of a split.
    pub min_child_weight: f64,
    pub seed: u64,
}

impl Default for BoostedParams {
    fn default() -> Self {
        BoostedParams {
            rounds: 100,
            learning_rate: 0.1,
            max_depth: 3,
            lambda: 1.0,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

/// Gradient boosting with logistic loss over exact-greedy regression trees.
///
/// Training is deterministic in the data order: no row or column sampling is
/// performed, and the seed is only recorded.
pub fn train_boosted(data: &[LabeledExample], params: &BoostedParams) -> Result<FailureEstimator, EstimatorError> {
    if !(params.learning_rate > 0.0 && params.learning_rate.is_finite()) {
        return Err(EstimatorError::InvalidParams("learning_rate must be positive".into()));
    }
    if params.max_depth == 0 {
        return Err(EstimatorError::InvalidParams("max_depth must be positive".into()));
    }
    if params.lambda < 0.0 || params.min_child_weight < 0.0 {
        return Err(EstimatorError::InvalidParams("lambda and min_child_weight must be nonnegative".into()));
    }
    let (rows, labels) = unpack(data)?;
    let n = rows.len();
    let positives = labels.iter().filter(|&&y| y).count();
    let rate = positives as f64 / n as f64;
    let base_score = logit(rate.clamp(RATE_CLAMP, 1.0 - RATE_CLAMP));

    let mut margins = vec![base_score; n];
    let mut probs: Vec<f64> = margins.iter().map(|&m| sigmoid(m)).collect();
    let mut training_loss = vec![mean_log_loss(&probs, &labels)];
    let mut trees = Vec::with_capacity(params.rounds);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut idx: Vec<usize> = (0..n).collect();

    for _ in 0..params.rounds {
        for i in 0..n {
            let y = if labels[i] { 1.0 } else { 0.0 };
            grad[i] = probs[i] - y;
            hess[i] = probs[i] * (1.0 - probs[i]);
        }
        idx.iter_mut().enumerate().for_each(|(k, i)| *i = k);
        let tree = GradientTreeBuilder {
            rows: &rows,
            grad: &grad,
            hess: &hess,
            max_depth: params.max_depth,
            lambda: params.lambda,
            min_child_weight: params.min_child_weight,
        }
        .build(&mut idx);
        for i in 0..n {
            margins[i] += params.learning_rate * tree.predict(&rows[i]);
            probs[i] = sigmoid(margins[i]);
        }
        training_loss.push(mean_log_loss(&probs, &labels));
        trees.push(tree);
    }

    Ok(FailureEstimator::new(
        Model::Boosted {
            base_score,
            learning_rate: params.learning_rate,
            max_depth: params.max_depth,
            trees,
        },
        TrainingMetadata {
            seed: params.seed,
            rounds: params.rounds,
            dataset_size: n,
            positives,
            degenerate: positives == 0 || positives == n,
            training_loss,
        },
    ))
}
