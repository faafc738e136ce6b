//! CART regression tree: variance-reduction splits over a sampled
//! feature subset per node.

use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub max_depth: u32,
    pub min_leaf: usize,
    pub features_per_split: usize,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: u32,
        right: u32,
    },
}

#[derive(Debug, Clone)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    /// Fit on the rows listed in `rows` (bootstrap indices, duplicates
    /// allowed) against column-major features.
    pub fn fit<R: Rng>(
        columns: &[Vec<f64>],
        target: &[f64],
        rows: &mut [u32],
        params: &TreeParams,
        rng: &mut R,
    ) -> Self {
        let mut tree = RegressionTree { nodes: Vec::new() };
        tree.build(columns, target, rows, 0, params, rng);
        tree
    }

    fn leaf(&mut self, value: f64) -> u32 {
        self.nodes.push(Node::Leaf { value });
        (self.nodes.len() - 1) as u32
    }

    fn build<R: Rng>(
        &mut self,
        columns: &[Vec<f64>],
        target: &[f64],
        rows: &mut [u32],
        depth: u32,
        params: &TreeParams,
        rng: &mut R,
    ) -> u32 {
        let n = rows.len();
        let sum: f64 = rows.iter().map(|&r| target[r as usize]).sum();
        let mean = sum / n as f64;
        let sse: f64 = rows
            .iter()
            .map(|&r| {
                let d = target[r as usize] - mean;
                d * d
            })
            .sum();
        if depth >= params.max_depth || n < 2 * params.min_leaf || sse == 0.0 {
            return self.leaf(mean);
        }

        let p = columns.len();
        let m = params.features_per_split.clamp(1, p);
        let candidates = rand::seq::index::sample(rng, p, m);

        // Best split maximizes sum_L^2/n_L + sum_R^2/n_R, which minimizes
        // the pooled child SSE.
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted: Vec<u32> = Vec::with_capacity(n);
        for j in candidates {
            let column = &columns[j];
            sorted.clear();
            sorted.extend_from_slice(rows);
            sorted.sort_unstable_by(|&a, &b| {
                column[a as usize]
                    .total_cmp(&column[b as usize])
                    .then(a.cmp(&b))
            });
            let mut left_sum = 0.0;
            for k in 1..n {
                left_sum += target[sorted[k - 1] as usize];
                let prev = column[sorted[k - 1] as usize];
                let cur = column[sorted[k] as usize];
                if prev == cur {
                    continue;
                }
                if k < params.min_leaf || n - k < params.min_leaf {
                    continue;
                }
                let right_sum = sum - left_sum;
                let score =
                    left_sum * left_sum / k as f64 + right_sum * right_sum / (n - k) as f64;
                if best.is_none_or(|(bs, _, _)| score > bs) {
                    best = Some((score, j, (prev + cur) / 2.0));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            return self.leaf(mean);
        };

        // Stable partition around the threshold.
        let column = &columns[feature];
        let mut left_rows: Vec<u32> = Vec::new();
        let mut right_rows: Vec<u32> = Vec::new();
        for &r in rows.iter() {
            if column[r as usize] <= threshold {
                left_rows.push(r);
            } else {
                right_rows.push(r);
            }
        }

        let split_index = self.nodes.len() as u32;
        self.nodes.push(Node::Split {
            feature,
            threshold,
            left: 0,
            right: 0,
        });
        let left = self.build(columns, target, &mut left_rows, depth + 1, params, rng);
        let right = self.build(columns, target, &mut right_rows, depth + 1, params, rng);
        if let Node::Split {
            left: l, right: r, ..
        } = &mut self.nodes[split_index as usize]
        {
            *l = left;
            *r = right;
        }
        split_index
    }

    /// Predict with an arbitrary feature accessor, so callers can present
    /// permuted columns without copying the matrix.
    pub fn predict_with(&self, value_of: &dyn Fn(usize) -> f64) -> f64 {
        let mut index = 0usize;
        loop {
            match &self.nodes[index] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    index = if value_of(*feature) <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    fn params(depth: u32, min_leaf: usize, m: usize) -> TreeParams {
        TreeParams {
            max_depth: depth,
            min_leaf,
            features_per_split: m,
        }
    }

    #[test]
    fn constant_target_is_single_leaf() {
        let columns = vec![(0..20).map(f64::from).collect::<Vec<f64>>()];
        let target = vec![5.0; 20];
        let mut rows: Vec<u32> = (0..20).collect();
        let tree = RegressionTree::fit(
            &columns,
            &target,
            &mut rows,
            &params(10, 1, 1),
            &mut seeding::rng(1, 0),
        );
        assert_eq!(tree.node_count(), 1);
        assert_eq!(tree.predict_with(&|_| 3.0), 5.0);
    }

    #[test]
    fn learns_identity_function() {
        let xs: Vec<f64> = (0..32).map(f64::from).collect();
        let columns = vec![xs.clone()];
        let mut rows: Vec<u32> = (0..32).collect();
        let tree = RegressionTree::fit(
            &columns,
            &xs,
            &mut rows,
            &params(6, 1, 1),
            &mut seeding::rng(2, 0),
        );
        for &x in &xs {
            assert_eq!(tree.predict_with(&|_| x), x);
        }
    }

    #[test]
    fn respects_min_leaf() {
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let columns = vec![xs.clone()];
        let mut rows: Vec<u32> = (0..10).collect();
        let tree = RegressionTree::fit(
            &columns,
            &xs,
            &mut rows,
            &params(10, 5, 1),
            &mut seeding::rng(3, 0),
        );
        // One split of 10 rows into 5/5 at most.
        assert!(tree.node_count() <= 3);
    }
}
