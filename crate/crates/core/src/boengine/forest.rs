//! Regression forest used as a surrogate over discrete design spaces.
//!
//! Tree `t` draws its bootstrap sample and feature subsets from
//! `ChaCha8Rng::seed_from_u64(seed + t)`: first `n` bootstrap indices via
//! `random_range(0..n)`, then, at every node in depth-first pre-order, a
//! feature subset via `rand::seq::index::sample` when `max_features < 1`.
//! Splits minimize the summed (two-pass) squared error at midpoints between
//! distinct feature values; a later candidate in (feature, threshold) order
//! replaces the best only if it is lower by more than [`SPLIT_TOLERANCE`].

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A split must beat the current best by more than this to replace it.
pub const SPLIT_TOLERANCE: f64 = 1e-12;

/// Added to the across-tree variance so it is never zero.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Fraction of features considered at each split.
    pub max_features: f64,
    pub min_samples_split: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 10,
            max_features: 1.0,
            min_samples_split: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Node::Leaf(v) => *v,
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct RandomForest {
    trees: Vec<Node>,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    params: ForestParams,
    n_features: usize,
}

fn mean(y: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64
}

fn sse(y: &[f64], idx: &[usize]) -> f64 {
    let m = mean(y, idx);
    idx.iter().map(|&i| (y[i] - m).powi(2)).sum()
}

impl Builder<'_> {
    fn build(&self, idx: &mut [usize], rng: &mut ChaCha8Rng) -> Node {
        let leaf = Node::Leaf(mean(self.y, idx));
        if idx.len() < self.params.min_samples_split.max(2) {
            return leaf;
        }
        let first = self.y[idx[0]];
        if idx.iter().all(|&i| self.y[i] == first) {
            return leaf;
        }
        let features: Vec<usize> = if self.params.max_features >= 1.0 {
            (0..self.n_features).collect()
        } else {
            let k = ((self.params.max_features * self.n_features as f64).ceil() as usize)
                .clamp(1, self.n_features);
            let mut f = sample(rng, self.n_features, k).into_vec();
            f.sort_unstable();
            f
        };

        let parent_sse = sse(self.y, idx);
        let mut best: Option<(f64, usize, f64)> = None;
        for &f in &features {
            let mut values: Vec<f64> = idx.iter().map(|&i| self.x[i][f]).collect();
            values.sort_by(f64::total_cmp);
            values.dedup();
            for w in values.windows(2) {
                let threshold = 0.5 * (w[0] + w[1]);
                let (l, r): (Vec<usize>, Vec<usize>) =
                    idx.iter().partition(|&&i| self.x[i][f] <= threshold);
                let s = sse(self.y, &l) + sse(self.y, &r);
                if best.is_none_or(|(b, _, _)| s < b - SPLIT_TOLERANCE) {
                    best = Some((s, f, threshold));
                }
            }
        }
        let Some((sse, feature, threshold)) = best else {
            return leaf;
        };
        if sse >= parent_sse {
            return leaf;
        }
        let mid = stable_partition(idx, |&i| self.x[i][feature] <= threshold);
        let (l, r) = idx.split_at_mut(mid);
        let left = self.build(l, rng);
        let right = self.build(r, rng);
        Node::Split {
            feature,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

/// Stable in-place partition; returns the number of elements satisfying `pred`.
fn stable_partition(v: &mut [usize], pred: impl Fn(&usize) -> bool) -> usize {
    let (yes, no): (Vec<usize>, Vec<usize>) = v.iter().partition(|i| pred(i));
    let n = yes.len();
    for (slot, val) in v.iter_mut().zip(yes.into_iter().chain(no)) {
        *slot = val;
    }
    n
}

impl RandomForest {
    pub fn fit(x: &[Vec<f64>], y: &[f64], params: ForestParams) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::invalid(
                "forest needs at least one sample and matching targets",
            ));
        }
        if params.n_trees == 0 || !(params.max_features > 0.0 && params.max_features <= 1.0) {
            return Err(Error::invalid(
                "forest needs n_trees >= 1 and max_features in (0, 1]",
            ));
        }
        let n_features = x[0].len();
        let builder = Builder {
            x,
            y,
            params,
            n_features,
        };
        let trees = (0..params.n_trees)
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(t as u64));
                let mut idx: Vec<usize> =
                    (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
                builder.build(&mut idx, &mut rng)
            })
            .collect();
        Ok(Self { trees })
    }

    pub fn tree_predictions(&self, x: &[f64]) -> Vec<f64> {
        self.trees.iter().map(|t| t.predict(x)).collect()
    }

    /// Mean of the tree predictions and their population variance plus
    /// [`VARIANCE_FLOOR`].
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let p = self.tree_predictions(x);
        let n = p.len() as f64;
        let m = p.iter().sum::<f64>() / n;
        let v = p.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        (m, v + VARIANCE_FLOOR)
    }
}

pub fn rf_posterior(forest: &RandomForest, x: &[f64]) -> (f64, f64) {
    forest.posterior(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_targets() {
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0]).collect();
        let f = RandomForest::fit(&x, &[0.7; 5], ForestParams::default()).unwrap();
        let (m, v) = f.posterior(&[2.5, 0.0]);
        assert!((m - 0.7).abs() < 1e-15);
        assert!((v - VARIANCE_FLOOR).abs() < 1e-18);
    }

    #[test]
    fn single_tree_full_depth_recalls_training_points() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..8).map(|i| (i * i) as f64).collect();
        let params = ForestParams {
            n_trees: 1,
            ..Default::default()
        };
        let f = RandomForest::fit(&x, &y, params).unwrap();
        // every point that made it into the bootstrap is recalled exactly
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let boot: Vec<usize> = (0..8).map(|_| rng.random_range(0..8)).collect();
        for &i in &boot {
            assert_eq!(f.posterior(&x[i]).0, y[i]);
        }
    }

    #[test]
    fn partition_is_stable() {
        let mut v = vec![5, 1, 4, 2, 3];
        let n = stable_partition(&mut v, |&x| x % 2 == 1);
        assert_eq!(n, 3);
        assert_eq!(v, vec![5, 1, 3, 4, 2]);
    }
}
