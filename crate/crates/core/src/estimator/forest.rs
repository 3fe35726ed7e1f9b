use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::GiniTreeBuilder;
use super::{unpack, EstimatorError, FailureEstimator, LabeledExample, Model, TrainingMetadata};
use crate::features::FEATURE_COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: usize,
    /// ceil(sqrt(6)) = 3 features are examined per split.
    pub max_features: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            trees: 200,
            max_depth: 6,
            max_features: (FEATURE_COUNT as f64).sqrt().ceil() as usize,
            bootstrap: true,
            seed: 0,
        }
    }
}

/// Bagged gini trees; the prediction is the mean leaf failure frequency.
///
/// Each tree draws its own ChaCha8 stream from a master generator seeded with
/// `params.seed`, so the forest is a pure function of (data, params).
pub fn train_forest(data: &[LabeledExample], params: &ForestParams) -> Result<FailureEstimator, EstimatorError> {
    if params.trees == 0 || params.max_depth == 0 {
        return Err(EstimatorError::InvalidParams("trees and max_depth must be positive".into()));
    }
    if params.max_features == 0 || params.max_features > FEATURE_COUNT {
        return Err(EstimatorError::InvalidParams(format!(
            "max_features must be in 1..={FEATURE_COUNT}"
        )));
    }
    let (rows, labels) = unpack(data)?;
    let n = rows.len();
    let positives = labels.iter().filter(|&&y| y).count();
    let builder = GiniTreeBuilder {
        rows: &rows,
        labels: &labels,
        max_depth: params.max_depth,
        max_features: params.max_features,
    };
    let mut master = ChaCha8Rng::seed_from_u64(params.seed);
    let trees = (0..params.trees)
        .map(|_| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
            let mut idx: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            builder.build(&mut idx, &mut rng)
        })
        .collect();
    Ok(FailureEstimator::new(
        Model::Forest {
            max_depth: params.max_depth,
            trees,
        },
        TrainingMetadata {
            seed: params.seed,
            rounds: params.trees,
            dataset_size: n,
            positives,
            degenerate: positives == 0 || positives == n,
            training_loss: vec![],
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::tree::TreeNode;
    use crate::features::FeatureVector;

    fn step_data() -> Vec<LabeledExample> {
        (0..50)
            .map(|i| {
                let x = i as f64 / 50.0;
                LabeledExample {
                    features: FeatureVector::from_array([0.0, 0.0, x, 0.0, 0.0, 0.0]),
                    label: x > 0.41,
                }
            })
            .collect()
    }

    #[test]
    fn constant_labels_predict_that_label() {
        for label in [false, true] {
            let data: Vec<_> = step_data().into_iter().map(|e| LabeledExample { label, ..e }).collect();
            let est = train_forest(&data, &ForestParams { trees: 5, ..Default::default() }).unwrap();
            assert!(est.training_metadata.degenerate);
            let expected = if label { 1.0 } else { 0.0 };
            assert_eq!(est.predict_row(&[0.5; 6]), expected);
        }
    }

    #[test]
    fn single_stump_recovers_step_threshold() {
        let params = ForestParams {
            trees: 1,
            max_depth: 1,
            seed: 9,
            ..Default::default()
        };
        let est = train_forest(&step_data(), &params).unwrap();
        let Model::Forest { trees, .. } = &est.model else { unreachable!() };
        let TreeNode::Split(f, t, _, _) = &trees[0] else {
            panic!("expected a split: {:?}", trees[0]);
        };
        assert_eq!(*f, 2);
        // true step lies between grid points 0.40 and 0.42; a bootstrap
        // sample can widen the gap by at most one grid spacing either side
        assert!((0.38..=0.44).contains(t), "threshold {t}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let data = step_data();
        let params = ForestParams { trees: 10, seed: 4, ..Default::default() };
        let a = train_forest(&data, &params).unwrap();
        let b = train_forest(&data, &params).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = train_forest(&data, &ForestParams { seed: 5, ..params }).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn rejects_bad_params() {
        let bad = ForestParams { max_features: 7, ..Default::default() };
        assert!(matches!(train_forest(&step_data(), &bad), Err(EstimatorError::InvalidParams(_))));
    }
}
