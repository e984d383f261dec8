use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ForestConfig, ForestFloat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", bound = "F: ForestFloat")]
pub enum TreeNode<F> {
    Internal {
        feature: usize,
        threshold: F,
        /// Reduction in summed squared error achieved by this split.
        decrease: F,
        left: Box<TreeNode<F>>,
        right: Box<TreeNode<F>>,
    },
    Leaf {
        prediction: F,
        count: usize,
    },
}

impl<F: ForestFloat> TreeNode<F> {
    pub fn route(&self, row: &[F]) -> F {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { prediction, .. } => return *prediction,
                TreeNode::Internal { feature, threshold, left, right, .. } => {
                    node = if row[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Internal { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Training-row counts of every leaf, left to right.
    pub fn leaf_counts(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaf_counts(&mut out);
        out
    }

    fn collect_leaf_counts(&self, out: &mut Vec<usize>) {
        match self {
            TreeNode::Leaf { count, .. } => out.push(*count),
            TreeNode::Internal { left, right, .. } => {
                left.collect_leaf_counts(out);
                right.collect_leaf_counts(out);
            }
        }
    }

    pub(super) fn accumulate_importance(&self, totals: &mut [f64]) {
        if let TreeNode::Internal { feature, decrease, left, right, .. } = self {
            totals[*feature] += decrease.to_f64().unwrap_or(0.0);
            left.accumulate_importance(totals);
            right.accumulate_importance(totals);
        }
    }
}

pub(super) struct TrainingData<'a, F> {
    pub columns: &'a [Vec<F>],
    pub targets: &'a [F],
}

pub(super) fn sample_rows(n: usize, bootstrap: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if bootstrap {
        (0..n).map(|_| rng.gen_range(0..n)).collect()
    } else {
        (0..n).collect()
    }
}

struct Split<F> {
    feature: usize,
    threshold: F,
    children_sse: F,
}

pub(super) fn grow<F: ForestFloat>(
    data: &TrainingData<'_, F>,
    mut rows: Vec<usize>,
    config: &ForestConfig,
    features_per_split: usize,
    rng: &mut ChaCha8Rng,
) -> TreeNode<F> {
    build(data, &mut rows, 0, config, features_per_split, rng)
}

fn leaf<F: ForestFloat>(targets: &[F], rows: &[usize]) -> TreeNode<F> {
    let (lo, hi) = rows
        .iter()
        .map(|&i| targets[i])
        .fold((F::infinity(), F::neg_infinity()), |(lo, hi), t| (lo.min(t), hi.max(t)));
    let prediction = if lo == hi {
        lo
    } else {
        let sum = rows.iter().fold(F::zero(), |acc, &i| acc + targets[i]);
        (sum / F::from(rows.len()).expect("row count fits")).max(lo).min(hi)
    };
    TreeNode::Leaf { prediction, count: rows.len() }
}

fn build<F: ForestFloat>(
    data: &TrainingData<'_, F>,
    rows: &mut [usize],
    depth: usize,
    config: &ForestConfig,
    features_per_split: usize,
    rng: &mut ChaCha8Rng,
) -> TreeNode<F> {
    let n = rows.len();
    let targets = data.targets;
    let first = targets[rows[0]];
    let pure = rows.iter().all(|&i| targets[i] == first);
    let depth_reached = config.max_depth.is_some_and(|d| depth >= d);
    if pure || depth_reached || n < 2 * config.min_samples_leaf {
        return leaf(targets, rows);
    }

    let width = data.columns.len();
    let mut candidates: Vec<usize> = if features_per_split >= width {
        (0..width).collect()
    } else {
        index::sample(rng, width, features_per_split).into_vec()
    };
    candidates.sort_unstable();

    let nf = F::from(n).expect("row count fits");
    let mean = rows.iter().fold(F::zero(), |acc, &i| acc + targets[i]) / nf;
    let parent_sse = rows.iter().fold(F::zero(), |acc, &i| {
        let d = targets[i] - mean;
        acc + d * d
    });

    let Some(best) = best_split(data, rows, &candidates, mean, config.min_samples_leaf) else {
        return leaf(targets, rows);
    };
    let tolerance = F::from(1e-9).expect("constant") * parent_sse.max(F::one());
    assert!(
        best.children_sse <= parent_sse + tolerance,
        "split increased squared error: {:?} > {:?}",
        best.children_sse,
        parent_sse
    );

    let column = &data.columns[best.feature];
    let mut split_at = 0;
    for i in 0..n {
        if column[rows[i]] <= best.threshold {
            rows.swap(i, split_at);
            split_at += 1;
        }
    }
    let (left_rows, right_rows) = rows.split_at_mut(split_at);
    // partitioning is unstable; restore ascending order so child results do
    // not depend on swap history
    left_rows.sort_unstable();
    right_rows.sort_unstable();
    let left = build(data, left_rows, depth + 1, config, features_per_split, rng);
    let right = build(data, right_rows, depth + 1, config, features_per_split, rng);
    TreeNode::Internal {
        feature: best.feature,
        threshold: best.threshold,
        decrease: (parent_sse - best.children_sse).max(F::zero()),
        left: Box::new(left),
        right: Box::new(right),
    }
}

/// Exhaustive search over candidate features and midpoint thresholds.
/// Ties keep the lowest feature index, then the lowest threshold.
fn best_split<F: ForestFloat>(
    data: &TrainingData<'_, F>,
    rows: &[usize],
    candidates: &[usize],
    mean: F,
    min_leaf: usize,
) -> Option<Split<F>> {
    let n = rows.len();
    let mut best: Option<Split<F>> = None;
    let mut sorted: Vec<(F, F)> = Vec::with_capacity(n);
    for &feature in candidates {
        let column = &data.columns[feature];
        sorted.clear();
        // centred targets keep the running sums well conditioned
        sorted.extend(rows.iter().map(|&i| (column[i], data.targets[i] - mean)));
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));

        let total: F = sorted.iter().fold(F::zero(), |acc, p| acc + p.1);
        let total_sq: F = sorted.iter().fold(F::zero(), |acc, p| acc + p.1 * p.1);
        let (mut sum_left, mut sq_left) = (F::zero(), F::zero());
        for i in 1..n {
            let (value, y) = sorted[i - 1];
            sum_left = sum_left + y;
            sq_left = sq_left + y * y;
            let next = sorted[i].0;
            if i < min_leaf || n - i < min_leaf || !(value < next) {
                continue;
            }
            let (nl, nr) = (F::from(i).expect("fits"), F::from(n - i).expect("fits"));
            let sum_right = total - sum_left;
            let sse_left = (sq_left - sum_left * sum_left / nl).max(F::zero());
            let sse_right = ((total_sq - sq_left) - sum_right * sum_right / nr).max(F::zero());
            let children_sse = sse_left + sse_right;
            if best.as_ref().map_or(true, |b| children_sse < b.children_sse) {
                let two = F::one() + F::one();
                let mut threshold = value + (next - value) / two;
                if !(threshold < next) {
                    threshold = value;
                }
                best = Some(Split { feature, threshold, children_sse });
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn midpoint_threshold_and_routing() {
        let columns = vec![vec![1.0, 2.0, 3.0, 4.0]];
        let targets = vec![0.0, 0.0, 10.0, 10.0];
        let data = TrainingData { columns: &columns, targets: &targets };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tree = grow(&data, vec![0, 1, 2, 3], &ForestConfig::interpolating(), 1, &mut rng);
        match &tree {
            TreeNode::Internal { feature, threshold, .. } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, 2.5);
            }
            leaf => panic!("expected a split, got {leaf:?}"),
        }
        assert_eq!(tree.route(&[2.5]), 0.0);
        assert_eq!(tree.route(&[2.6]), 10.0);
    }

    #[test]
    fn ties_prefer_lowest_feature_then_threshold() {
        // both features separate the targets identically
        let columns = vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]];
        let targets = vec![0.0, 5.0, 5.0];
        let data = TrainingData { columns: &columns, targets: &targets };
        let split = best_split(&data, &[0, 1, 2], &[0, 1], 10.0 / 3.0, 1).unwrap();
        assert_eq!(split.feature, 0);
        assert_eq!(split.threshold, 1.5);

        // symmetric targets: both thresholds give the same error, keep the lower
        let columns = vec![vec![1.0, 2.0, 3.0, 4.0]];
        let targets = vec![1.0, 0.0, 0.0, 1.0];
        let data = TrainingData { columns: &columns, targets: &targets };
        let split = best_split(&data, &[0, 1, 2, 3], &[0], 0.5, 1).unwrap();
        assert_eq!(split.threshold, 1.5);
    }

    #[test]
    fn adjacent_floats_never_put_upper_value_left() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let columns = vec![vec![a, b]];
        let targets = vec![0.0, 1.0];
        let data = TrainingData { columns: &columns, targets: &targets };
        let split = best_split(&data, &[0, 1], &[0], 0.5, 1).unwrap();
        assert!(a <= split.threshold && split.threshold < b);
    }
}
