use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{mean_log_loss, unpack, EstimatorError, FailureEstimator, LabeledExample, Model, TrainingMetadata};
use crate::features::FEATURE_COUNT;
use crate::numeric::{logit, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    /// Ridge penalty on the standardized weights (not the intercept).
    pub l2: f64,
    pub max_iter: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        LogisticParams {
            l2: 1.0,
            max_iter: 50,
            tolerance: 1e-10,
            seed: 0,
        }
    }
}

/// Ridge-penalized logistic regression on standardized features, fitted by
/// Newton's method (IRLS).
pub fn train_logistic(data: &[LabeledExample], params: &LogisticParams) -> Result<FailureEstimator, EstimatorError> {
    if !(params.l2 >= 0.0) || params.max_iter == 0 {
        return Err(EstimatorError::InvalidParams("l2 must be >= 0 and max_iter > 0".into()));
    }
    let (rows, labels) = unpack(data)?;
    let n = rows.len();
    let positives = labels.iter().filter(|&&y| y).count();
    let nf = n as f64;

    let mut means = [0.0; FEATURE_COUNT];
    let mut scales = [1.0; FEATURE_COUNT];
    for j in 0..FEATURE_COUNT {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / nf;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / nf;
        means[j] = mean;
        if var.sqrt() > 1e-12 {
            scales[j] = var.sqrt();
        }
    }
    let dim = FEATURE_COUNT + 1;
    // column 0 is the intercept
    let design = DMatrix::from_fn(n, dim, |i, j| {
        if j == 0 {
            1.0
        } else {
            (rows[i][j - 1] - means[j - 1]) / scales[j - 1]
        }
    });
    let y = DVector::from_iterator(n, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));

    let rate = (positives as f64 / nf).clamp(1e-6, 1.0 - 1e-6);
    let mut beta = DVector::zeros(dim);
    beta[0] = logit(rate);
    let degenerate = positives == 0 || positives == n;
    let mut iterations = 0;
    if !degenerate {
        let mut penalty = DMatrix::identity(dim, dim) * params.l2;
        penalty[(0, 0)] = 0.0;
        for _ in 0..params.max_iter {
            iterations += 1;
            let p = (&design * &beta).map(sigmoid);
            let w = p.map(|v| v * (1.0 - v));
            let grad = design.transpose() * (&p - &y) + &penalty * &beta;
            let mut hessian = &penalty + DMatrix::identity(dim, dim) * 1e-9;
            for i in 0..n {
                let row = design.row(i);
                hessian += row.transpose() * row * w[i];
            }
            let Some(step) = hessian.cholesky().map(|c| c.solve(&grad)) else {
                break;
            };
            beta -= &step;
            if step.amax() < params.tolerance {
                break;
            }
        }
    }
    let weights = std::array::from_fn(|j| beta[j + 1]);
    let est = FailureEstimator::new(
        Model::Logistic {
            means,
            scales,
            weights,
            intercept: beta[0],
        },
        TrainingMetadata {
            seed: params.seed,
            rounds: iterations,
            dataset_size: n,
            positives,
            degenerate,
            training_loss: vec![],
        },
    );
    let probs: Vec<f64> = rows.iter().map(|r| est.predict_row(r)).collect();
    let mut est = est;
    est.training_metadata.training_loss = vec![mean_log_loss(&probs, &labels)];
    Ok(est)
}
