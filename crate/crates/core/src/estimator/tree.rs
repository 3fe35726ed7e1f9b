//! Binary decision trees over the six ensemble features.
//!
//! Trees serialize as nested arrays: a leaf is a bare number and a split is
//! `[feature_index, threshold, left, right]`, where rows with
//! `x[feature_index] <= threshold` go left.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::FEATURE_COUNT;

pub type Row = [f64; FEATURE_COUNT];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Leaf(f64),
    Split(usize, f64, Box<TreeNode>, Box<TreeNode>),
}

impl TreeNode {
    pub fn predict(&self, x: &Row) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf(v) => return *v,
                TreeNode::Split(f, t, left, right) => {
                    node = if x[*f] <= *t { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf(_) => 0,
            TreeNode::Split(_, _, l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    /// Checks feature indices, finite thresholds and leaves, and depth.
    pub fn validate(&self, max_depth: usize) -> Result<(), String> {
        if self.depth() > max_depth {
            return Err(format!("tree depth {} exceeds max_depth {max_depth}", self.depth()));
        }
        self.validate_nodes()
    }

    fn validate_nodes(&self) -> Result<(), String> {
        match self {
            TreeNode::Leaf(v) if v.is_finite() => Ok(()),
            TreeNode::Leaf(v) => Err(format!("non-finite leaf value {v}")),
            TreeNode::Split(f, t, l, r) => {
                if *f >= FEATURE_COUNT {
                    return Err(format!("feature index {f} out of range"));
                }
                if !t.is_finite() {
                    return Err(format!("non-finite threshold {t}"));
                }
                l.validate_nodes()?;
                r.validate_nodes()
            }
        }
    }
}

// Midpoint between two distinct sorted values that still separates them.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= hi || !mid.is_finite() {
        lo
    } else {
        mid
    }
}

fn sort_by_feature(rows: &[Row], idx: &mut [usize], feature: usize) {
    idx.sort_by(|&a, &b| rows[a][feature].total_cmp(&rows[b][feature]).then(a.cmp(&b)));
}

fn partition(rows: &[Row], idx: &mut [usize], feature: usize, threshold: f64) -> usize {
    // stable partition keeps row order deterministic
    let (left, right): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| rows[i][feature] <= threshold);
    let n_left = left.len();
    idx[..n_left].copy_from_slice(&left);
    idx[n_left..].copy_from_slice(&right);
    n_left
}

#[derive(Debug, Clone, Copy)]
struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Second-order regression tree for gradient boosting (exact greedy splits).
pub struct GradientTreeBuilder<'a> {
    pub rows: &'a [Row],
    pub grad: &'a [f64],
    pub hess: &'a [f64],
    pub max_depth: usize,
    pub lambda: f64,
    pub min_child_weight: f64,
}

impl GradientTreeBuilder<'_> {
    pub fn build(&self, idx: &mut [usize]) -> TreeNode {
        self.grow(idx, 0)
    }

    fn grow(&self, idx: &mut [usize], depth: usize) -> TreeNode {
        let g: f64 = idx.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = idx.iter().map(|&i| self.hess[i]).sum();
        let leaf = TreeNode::Leaf(-g / (h + self.lambda));
        if depth >= self.max_depth || idx.len() < 2 {
            return leaf;
        }
        let Some(split) = self.best_split(idx, g, h) else {
            return leaf;
        };
        let n_left = partition(self.rows, idx, split.feature, split.threshold);
        let (left, right) = idx.split_at_mut(n_left);
        TreeNode::Split(
            split.feature,
            split.threshold,
            Box::new(self.grow(left, depth + 1)),
            Box::new(self.grow(right, depth + 1)),
        )
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.lambda)
    }

    fn best_split(&self, idx: &[usize], g: f64, h: f64) -> Option<Split> {
        let parent = self.score(g, h);
        let mut best: Option<Split> = None;
        let mut sorted = idx.to_vec();
        for feature in 0..FEATURE_COUNT {
            sort_by_feature(self.rows, &mut sorted, feature);
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..sorted.len() - 1 {
                let i = sorted[k];
                gl += self.grad[i];
                hl += self.hess[i];
                let (lo, hi) = (self.rows[i][feature], self.rows[sorted[k + 1]][feature]);
                if lo == hi {
                    continue;
                }
                let hr = h - hl;
                if hl < self.min_child_weight || hr < self.min_child_weight {
                    continue;
                }
                let gain = 0.5 * (self.score(gl, hl) + self.score(g - gl, hr) - parent);
                if gain > 1e-12 && best.is_none_or(|b| gain > b.gain) {
                    best = Some(Split {
                        feature,
                        threshold: midpoint(lo, hi),
                        gain,
                    });
                }
            }
        }
        best
    }
}

/// Gini classification tree; leaves hold the positive-class frequency.
pub struct GiniTreeBuilder<'a> {
    pub rows: &'a [Row],
    pub labels: &'a [bool],
    pub max_depth: usize,
    /// Features examined per split before falling back to the rest.
    pub max_features: usize,
}

impl GiniTreeBuilder<'_> {
    pub fn build<R: Rng>(&self, idx: &mut [usize], rng: &mut R) -> TreeNode {
        self.grow(idx, 0, rng)
    }

    fn grow<R: Rng>(&self, idx: &mut [usize], depth: usize, rng: &mut R) -> TreeNode {
        let positives = idx.iter().filter(|&&i| self.labels[i]).count();
        let leaf = TreeNode::Leaf(positives as f64 / idx.len() as f64);
        if depth >= self.max_depth || idx.len() < 2 || positives == 0 || positives == idx.len() {
            return leaf;
        }
        let Some(split) = self.best_split(idx, positives, rng) else {
            return leaf;
        };
        let n_left = partition(self.rows, idx, split.feature, split.threshold);
        let (left, right) = idx.split_at_mut(n_left);
        let left = self.grow(left, depth + 1, rng);
        let right = self.grow(right, depth + 1, rng);
        TreeNode::Split(split.feature, split.threshold, Box::new(left), Box::new(right))
    }

    fn best_split<R: Rng>(&self, idx: &[usize], positives: usize, rng: &mut R) -> Option<Split> {
        let mut order: [usize; FEATURE_COUNT] = std::array::from_fn(|i| i);
        order.shuffle(rng);
        let n = idx.len() as f64;
        let parent = gini(positives as f64, n);
        let mut sorted = idx.to_vec();
        let mut best: Option<Split> = None;
        for (visited, &feature) in order.iter().enumerate() {
            if visited >= self.max_features && best.is_some() {
                break;
            }
            sort_by_feature(self.rows, &mut sorted, feature);
            let mut pos_left = 0usize;
            for k in 0..sorted.len() - 1 {
                let i = sorted[k];
                pos_left += self.labels[i] as usize;
                let (lo, hi) = (self.rows[i][feature], self.rows[sorted[k + 1]][feature]);
                if lo == hi {
                    continue;
                }
                let n_left = (k + 1) as f64;
                let n_right = n - n_left;
                let weighted = (n_left * gini(pos_left as f64, n_left)
                    + n_right * gini((positives - pos_left) as f64, n_right))
                    / n;
                let gain = parent - weighted;
                if gain > 1e-12 && best.is_none_or(|b| gain > b.gain) {
                    best = Some(Split {
                        feature,
                        threshold: midpoint(lo, hi),
                        gain,
                    });
                }
            }
        }
        best
    }
}

fn gini(positives: f64, n: f64) -> f64 {
    let p = positives / n;
    2.0 * p * (1.0 - p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn row(x: f64) -> Row {
        [x, 0.0, 0.0, 0.0, 0.0, 0.0]
    }

    #[test]
    fn nested_array_serialization() {
        let t = TreeNode::Split(2, 0.5, Box::new(TreeNode::Leaf(-1.0)), Box::new(TreeNode::Leaf(1.5)));
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, "[2,0.5,-1.0,1.5]");
        assert_eq!(serde_json::from_str::<TreeNode>(&json).unwrap(), t);
        assert_eq!(t.predict(&[0.0, 0.0, 0.5, 0.0, 0.0, 0.0]), -1.0);
        assert_eq!(t.predict(&[0.0, 0.0, 0.6, 0.0, 0.0, 0.0]), 1.5);
    }

    #[test]
    fn validation_rejects_bad_nodes() {
        let bad = TreeNode::Split(6, 0.5, Box::new(TreeNode::Leaf(0.0)), Box::new(TreeNode::Leaf(0.0)));
        assert!(bad.validate(3).is_err());
        let deep = TreeNode::Split(0, 0.5, Box::new(TreeNode::Leaf(0.0)), Box::new(TreeNode::Leaf(0.0)));
        assert!(deep.validate(0).is_err());
        assert!(deep.validate(1).is_ok());
    }

    #[test]
    fn midpoint_separates_adjacent_values() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let m = midpoint(a, b);
        assert!(a <= m && m < b);
        assert_eq!(midpoint(1.0, 2.0), 1.5);
    }

    #[test]
    fn gini_stump_finds_step_threshold() {
        // Oracle: exhaustively score every midpoint and keep the best.
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.05).collect();
        let labels: Vec<bool> = xs.iter().map(|&x| x > 0.62).collect();
        let rows: Vec<Row> = xs.iter().map(|&x| row(x)).collect();
        let mut best = (f64::INFINITY, 0.0);
        for w in xs.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let errors = xs.iter().zip(&labels).filter(|(&x, &y)| (x > t) != y).count() as f64;
            if errors < best.0 {
                best = (errors, t);
            }
        }
        let builder = GiniTreeBuilder {
            rows: &rows,
            labels: &labels,
            max_depth: 1,
            max_features: 3,
        };
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        let tree = builder.build(&mut idx, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        match tree {
            TreeNode::Split(0, t, l, r) => {
                assert_eq!(t, best.1);
                assert_eq!((*l, *r), (TreeNode::Leaf(0.0), TreeNode::Leaf(1.0)));
            }
            other => panic!("expected a split on feature 0, got {other:?}"),
        }
    }

    #[test]
    fn gradient_tree_leaf_is_newton_step() {
        let rows = vec![row(0.0), row(1.0)];
        let grad = vec![0.5, -0.5];
        let hess = vec![0.25, 0.25];
        let b = GradientTreeBuilder {
            rows: &rows,
            grad: &grad,
            hess: &hess,
            max_depth: 0,
            lambda: 1.0,
            min_child_weight: 0.0,
        };
        assert_eq!(b.build(&mut [0, 1]), TreeNode::Leaf(0.0));
        let b = GradientTreeBuilder { max_depth: 1, ..b };
        assert_eq!(
            b.build(&mut [0, 1]),
            TreeNode::Split(0, 0.5, Box::new(TreeNode::Leaf(-0.4)), Box::new(TreeNode::Leaf(0.4)))
        );
    }
}
