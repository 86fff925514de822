//! Representation probes: AUROC, random forests and labeled-subset selection.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{child_rng, derive_seed, rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AurocResult {
    pub value: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn check_binary(labels: &[u8]) -> Result<()> {
    match labels.iter().position(|&y| y > 1) {
        Some(i) => Err(Error::contract(format!("label {} at index {i} is not 0/1", labels[i]))),
        None => Ok(()),
    }
}

/// Mann–Whitney AUROC with midranks for exactly equal scores.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<AurocResult> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    check_binary(labels)?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::contract(format!("NaN score at index {i}")));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(format!("auroc needs both classes, got {n_pos} positive and {n_neg} negative")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their midrank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += midrank * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let value = (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n);
    Ok(AurocResult { value, n_pos, n_neg })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfConfig {
    #[serde(default = "default_estimators")]
    pub n_estimators: usize,
    #[serde(default = "default_depth")]
    pub max_depth: usize,
}

fn default_estimators() -> usize {
    100
}
fn default_depth() -> usize {
    10
}

impl Default for RfConfig {
    fn default() -> Self {
        RfConfig { n_estimators: default_estimators(), max_depth: default_depth() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    /// `x[feature] <= threshold` goes left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { fraction } => return *fraction,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, i: usize) -> usize {
            match &t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
    pub n_features: usize,
    pub max_depth: usize,
    pub seed: u64,
}

struct Builder<'a> {
    x: &'a Matrix,
    y: &'a [u8],
    max_depth: usize,
    n_try: usize,
    tree_seed: u64,
    nodes: Vec<TreeNode>,
}

fn gini(pos: f64, total: f64) -> f64 {
    let p = pos / total;
    2.0 * p * (1.0 - p)
}

impl Builder<'_> {
    /// `heap` numbers nodes as in a complete binary tree; it seeds the node's
    /// feature draw, so a node's split does not depend on the depth limit.
    fn grow(&mut self, idx: &mut [usize], depth: usize, heap: u64) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i] == 1).count();
        let here = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { fraction: pos as f64 / idx.len() as f64 });
        if depth >= self.max_depth || idx.len() < 2 || pos == 0 || pos == idx.len() {
            return here;
        }
        let Some((feature, threshold)) = self.best_split(idx, heap) else {
            return here;
        };
        // stable partition keeps the multiset order deterministic
        let (mut l, mut r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x.get(i, feature) <= threshold);
        let left = self.grow(&mut l, depth + 1, 2 * heap + 1);
        let right = self.grow(&mut r, depth + 1, 2 * heap + 2);
        self.nodes[here] = TreeNode::Split { feature, threshold, left, right };
        here
    }

    fn best_split(&self, idx: &[usize], heap: u64) -> Option<(usize, f64)> {
        let d = self.x.cols();
        let mut features: Vec<usize> = (0..d).collect();
        let mut r = rng(derive_seed(self.tree_seed, "node", heap));
        let (chosen, _) = features.partial_shuffle(&mut r, self.n_try);
        let total = idx.len() as f64;
        let total_pos = idx.iter().filter(|&&i| self.y[i] == 1).count() as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut vals: Vec<(f64, u8)> = Vec::with_capacity(idx.len());
        for &f in chosen.iter() {
            vals.clear();
            vals.extend(idx.iter().map(|&i| (self.x.get(i, f), self.y[i])));
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0.0;
            for k in 0..vals.len() - 1 {
                left_pos += vals[k].1 as f64;
                if vals[k].0 == vals[k + 1].0 {
                    continue;
                }
                let nl = (k + 1) as f64;
                let nr = total - nl;
                let impurity = (nl * gini(left_pos, nl) + nr * gini(total_pos - left_pos, nr)) / total;
                if best.is_none_or(|(b, _, _)| impurity < b) {
                    let mut threshold = 0.5 * (vals[k].0 + vals[k + 1].0);
                    // midpoint can round up to the right value for adjacent floats
                    if threshold >= vals[k + 1].0 {
                        threshold = vals[k].0;
                    }
                    best = Some((impurity, f, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

fn check_features(x: &Matrix) -> Result<()> {
    match x.data().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::contract(format!("non-finite feature at flat index {i}"))),
        None => Ok(()),
    }
}

/// Bootstrap forest of Gini trees, `⌈√d⌉` candidate features per node.
/// Tree `t` uses seed `derive_seed(seed, "tree", t)`, so results do not
/// depend on how trees are scheduled across threads.
pub fn rf_train(x: &Matrix, y: &[u8], cfg: &RfConfig, seed: u64) -> Result<RandomForest> {
    let n = x.rows();
    if y.len() != n {
        return Err(Error::shape("rf_train", format!("{n} rows vs {} labels", y.len())));
    }
    if n < 2 || x.cols() == 0 {
        return Err(Error::contract(format!("rf_train needs at least 2 samples and 1 feature, got {n}x{}", x.cols())));
    }
    check_binary(y)?;
    check_features(x)?;
    let pos = y.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == n {
        return Err(Error::contract("rf_train needs both classes present"));
    }
    if cfg.n_estimators == 0 {
        return Err(Error::contract("n_estimators must be positive"));
    }
    let n_try = (x.cols() as f64).sqrt().ceil() as usize;
    let trees = (0..cfg.n_estimators)
        .into_par_iter()
        .map(|t| {
            let tree_seed = derive_seed(seed, "tree", t as u64);
            let mut r = child_rng(tree_seed, "bootstrap", 0);
            let mut idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
            let mut b = Builder { x, y, max_depth: cfg.max_depth, n_try, tree_seed, nodes: Vec::new() };
            b.grow(&mut idx, 0, 0);
            DecisionTree { nodes: b.nodes }
        })
        .collect();
    Ok(RandomForest { trees, n_features: x.cols(), max_depth: cfg.max_depth, seed })
}

/// Mean leaf positive-fraction over trees, per row.
pub fn rf_predict(forest: &RandomForest, x: &Matrix) -> Result<Vec<f64>> {
    if x.cols() != forest.n_features {
        return Err(Error::shape("rf_predict", format!("forest trained on {} features, got {}", forest.n_features, x.cols())));
    }
    if forest.trees.is_empty() {
        return Err(Error::contract("forest has no trees"));
    }
    let k = forest.trees.len() as f64;
    Ok((0..x.rows())
        .map(|i| {
            let row = x.row(i);
            forest.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / k
        })
        .collect())
}

/// `k` distinct indices of `0..n`, sorted. The draw is a prefix of one seeded
/// permutation, so for a fixed seed smaller subsets are contained in larger ones.
pub fn label_subsample(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::contract(format!("cannot draw {k} labeled samples from {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut child_rng(seed, "label_subsample", 0));
    let mut out = perm[..k].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// Uniform draw of at most `k` row indices, sorted (used to cap probe training sets).
pub fn cap_rows(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let all: Vec<usize> = (0..n).collect();
    let mut out: Vec<usize> = all.choose_multiple(&mut child_rng(seed, "cap_rows", 0), k).copied().collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        let r = auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert_eq!(r.value, 0.75);
        assert_eq!((r.n_pos, r.n_neg), (2, 2));
        assert_eq!(auroc(&[0.1, 0.2, 0.9, 0.95], &[0, 0, 1, 1]).unwrap().value, 1.0);
        assert_eq!(auroc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap().value, 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::Degenerate(_))));
        assert!(auroc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn single_leaf_tree_predicts_its_fraction() {
        let forest = RandomForest {
            trees: vec![DecisionTree { nodes: vec![TreeNode::Leaf { fraction: 0.3 }] }],
            n_features: 2,
            max_depth: 0,
            seed: 0,
        };
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-5.0, 9.0]]).unwrap();
        assert_eq!(rf_predict(&forest, &x).unwrap(), vec![0.3, 0.3]);
        assert!(rf_predict(&forest, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn stump_separates_threshold_data() {
        // two distinct values: every bootstrap holding both classes splits between them
        let x = Matrix::new(40, 1, (0..40).map(|i| if i % 2 == 0 { 0.25 } else { 1.5 }).collect()).unwrap();
        let y: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        for seed in 0..10 {
            let f = rf_train(&x, &y, &RfConfig { n_estimators: 1, max_depth: 1 }, seed).unwrap();
            assert!(f.trees[0].depth() <= 1);
            let s = rf_predict(&f, &x).unwrap();
            assert_eq!(auroc(&s, &y).unwrap().value, 1.0, "seed {seed}");
        }
    }

    #[test]
    fn subsample_contract() {
        assert_eq!(label_subsample(7, 7, 3).unwrap(), (0..7).collect::<Vec<_>>());
        let a = label_subsample(100, 5, 9).unwrap();
        assert_eq!(a, label_subsample(100, 5, 9).unwrap());
        let b = label_subsample(100, 10, 9).unwrap();
        assert!(a.iter().all(|i| b.contains(i)));
        assert!(label_subsample(3, 4, 0).is_err());
        assert_eq!(cap_rows(5, 10, 1), vec![0, 1, 2, 3, 4]);
        assert_eq!(cap_rows(50, 10, 1).len(), 10);
    }
}
