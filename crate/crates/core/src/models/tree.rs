//! CART trees (variance or Gini splits) and bagged forests.

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::derive_seed;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Criterion {
    /// Regression: sum of squared deviations.
    Variance,
    /// Classification over `n_classes` labels `0..n_classes`.
    Gini { n_classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub min_leaf: usize,
    /// 0 means unlimited.
    pub max_depth: usize,
    /// Features tried per split; `None` tries all.
    pub max_features: Option<usize>,
    pub criterion: Criterion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    /// Total impurity decrease per feature.
    pub importance: Vec<f64>,
}

impl Tree {
    pub fn predict_row(&self, x: &DMatrix<f64>, r: usize) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[(r, feature)] <= threshold { left } else { right },
            }
        }
    }
}

/// Impurity of a node given its targets (labels for Gini), scaled by size.
fn impurity(criterion: Criterion, y: &[f64], rows: &[usize]) -> f64 {
    match criterion {
        Criterion::Variance => {
            let n = rows.len() as f64;
            let m = rows.iter().map(|&r| y[r]).sum::<f64>() / n;
            rows.iter().map(|&r| (y[r] - m).powi(2)).sum()
        }
        Criterion::Gini { n_classes } => {
            let mut counts = vec![0usize; n_classes];
            for &r in rows {
                counts[y[r] as usize] += 1;
            }
            gini_weighted(&counts, rows.len())
        }
    }
}

fn gini_weighted(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let s: f64 = counts.iter().map(|&c| (c as f64 / nf).powi(2)).sum();
    nf * (1.0 - s)
}

fn leaf_value(criterion: Criterion, y: &[f64], rows: &[usize]) -> f64 {
    match criterion {
        Criterion::Variance => rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64,
        Criterion::Gini { n_classes } => {
            let mut counts = vec![0usize; n_classes];
            for &r in rows {
                counts[y[r] as usize] += 1;
            }
            let best = counts.iter().copied().max().unwrap_or(0);
            counts.iter().position(|&c| c == best).unwrap_or(0) as f64
        }
    }
}

struct Best {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Best threshold on one feature by a sorted prefix scan.
fn best_split_on(
    x: &DMatrix<f64>,
    y: &[f64],
    rows: &[usize],
    feature: usize,
    params: &TreeParams,
    parent: f64,
) -> Option<Best> {
    let n = rows.len();
    let col = x.column(feature);
    let mut pairs: Vec<(f64, usize)> = rows.iter().map(|&r| (col[r], r)).collect();
    pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let sorted: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let min_leaf = params.min_leaf.max(1);
    let mut best: Option<Best> = None;
    match params.criterion {
        Criterion::Variance => {
            let total: f64 = sorted.iter().map(|&r| y[r]).sum();
            let total_sq: f64 = sorted.iter().map(|&r| y[r] * y[r]).sum();
            let (mut s, mut sq) = (0.0, 0.0);
            for i in 0..n - 1 {
                let v = y[sorted[i]];
                s += v;
                sq += v * v;
                let nl = i + 1;
                let nr = n - nl;
                let (a, b) = (pairs[i].0, pairs[i + 1].0);
                if a == b || nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let left = sq - s * s / nl as f64;
                let right = (total_sq - sq) - (total - s).powi(2) / nr as f64;
                let gain = parent - left.max(0.0) - right.max(0.0);
                if best.as_ref().is_none_or(|bst| gain > bst.gain) {
                    best = Some(Best {
                        feature,
                        threshold: a + (b - a) / 2.0,
                        gain,
                    });
                }
            }
        }
        Criterion::Gini { n_classes } => {
            let mut right = vec![0usize; n_classes];
            for &r in &sorted {
                right[y[r] as usize] += 1;
            }
            let mut left = vec![0usize; n_classes];
            for i in 0..n - 1 {
                let c = y[sorted[i]] as usize;
                left[c] += 1;
                right[c] -= 1;
                let nl = i + 1;
                let nr = n - nl;
                let (a, b) = (pairs[i].0, pairs[i + 1].0);
                if a == b || nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let gain = parent - gini_weighted(&left, nl) - gini_weighted(&right, nr);
                if best.as_ref().is_none_or(|bst| gain > bst.gain) {
                    best = Some(Best {
                        feature,
                        threshold: a + (b - a) / 2.0,
                        gain,
                    });
                }
            }
        }
    }
    best
}

/// Grow a tree on `rows` (duplicates allowed for bootstrap samples).
pub fn grow(x: &DMatrix<f64>, y: &[f64], rows: Vec<usize>, params: &TreeParams, seed: u64) -> Tree {
    let p = x.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = Tree {
        nodes: Vec::new(),
        importance: vec![0.0; p],
    };
    // (node index, rows, depth)
    let mut stack = vec![(0usize, rows, 0usize)];
    tree.nodes.push(Node::Leaf { value: 0.0 });
    while let Some((id, rows, depth)) = stack.pop() {
        let value = leaf_value(params.criterion, y, &rows);
        let parent = impurity(params.criterion, y, &rows);
        let depth_ok = params.max_depth == 0 || depth < params.max_depth;
        if !depth_ok || rows.len() < 2 * params.min_leaf.max(1) || parent <= 1e-12 * rows.len() as f64 {
            tree.nodes[id] = Node::Leaf { value };
            continue;
        }
        let features: Vec<usize> = match params.max_features {
            Some(m) if m < p => {
                let mut f = index::sample(&mut rng, p, m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..p).collect(),
        };
        let mut best: Option<Best> = None;
        for &f in &features {
            if let Some(b) = best_split_on(x, y, &rows, f, params, parent) {
                if best.as_ref().is_none_or(|cur| b.gain > cur.gain) {
                    best = Some(b);
                }
            }
        }
        match best {
            Some(b) if b.gain > 0.0 => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| x[(i, b.feature)] <= b.threshold);
                tree.importance[b.feature] += b.gain;
                let left = tree.nodes.len();
                tree.nodes.push(Node::Leaf { value: 0.0 });
                let right = tree.nodes.len();
                tree.nodes.push(Node::Leaf { value: 0.0 });
                tree.nodes[id] = Node::Split {
                    feature: b.feature,
                    threshold: b.threshold,
                    left,
                    right,
                };
                stack.push((right, r, depth + 1));
                stack.push((left, l, depth + 1));
            }
            _ => tree.nodes[id] = Node::Leaf { value },
        }
    }
    tree
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub criterion: Criterion,
}

impl Forest {
    /// Each tree draws its own seed from `(seed, tree index)`, so the forest
    /// is identical whatever the worker schedule.
    pub fn fit(
        x: &DMatrix<f64>,
        y: &[f64],
        n_trees: usize,
        bootstrap: bool,
        params: &TreeParams,
        seed: u64,
    ) -> Forest {
        let n = x.nrows();
        let trees = par::map_range(n_trees, |t| {
            let tree_seed = derive_seed(seed, &[t as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed);
            let rows: Vec<usize> = if bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            grow(x, y, rows, params, rng.random())
        });
        Forest {
            trees,
            criterion: params.criterion,
        }
    }

    pub fn predict_row(&self, x: &DMatrix<f64>, r: usize) -> f64 {
        match self.criterion {
            Criterion::Variance => {
                self.trees.iter().map(|t| t.predict_row(x, r)).sum::<f64>() / self.trees.len() as f64
            }
            Criterion::Gini { n_classes } => {
                let mut votes = vec![0usize; n_classes];
                for t in &self.trees {
                    votes[t.predict_row(x, r) as usize] += 1;
                }
                let best = votes.iter().copied().max().unwrap_or(0);
                votes.iter().position(|&v| v == best).unwrap_or(0) as f64
            }
        }
    }

    pub fn importance(&self) -> Vec<f64> {
        let p = self.trees.first().map_or(0, |t| t.importance.len());
        let mut out = vec![0.0; p];
        for t in &self.trees {
            for (o, v) in out.iter_mut().zip(&t.importance) {
                *o += v;
            }
        }
        out
    }
}

/// Shuffle helper used by callers that need a seeded permutation.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}
