//! Binary regression tree: greedy growth on within-node variance, then
//! cost-complexity pruning with the subtree chosen by cross-validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gini impurity `1 - sum(p_j^2)` of a class distribution.
pub fn gini_impurity(class_probs: &[f64]) -> Result<f64> {
    if class_probs.is_empty() || class_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "not a probability vector: {class_probs:?}"
        )));
    }
    let total: f64 = class_probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "class probabilities sum to {total}, not 1"
        )));
    }
    Ok(1.0 - class_probs.iter().map(|p| p * p).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartParams {
    pub min_leaf: usize,
    pub cv_folds: usize,
    pub max_depth: usize,
}

impl Default for CartParams {
    fn default() -> Self {
        Self {
            min_leaf: 5,
            cv_folds: 10,
            max_depth: 20,
        }
    }
}

impl CartParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_leaf < 1 {
            return Err(Error::InvalidParameter("min_leaf must be at least 1".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::InvalidParameter("cv_folds must be at least 2".into()));
        }
        Ok(())
    }
}

/// Decision rule of an internal node. Values below `threshold` go left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
}

/// One node record. Every node keeps its training mean so any internal node
/// can become a leaf when pruned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartNode {
    pub value: f64,
    pub count: usize,
    /// Sum of squared deviations of the node's training targets.
    pub sse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitRule>,
}

/// Tree stored as a node list with the root at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartModel {
    pub feature_dim: usize,
    pub nodes: Vec<CartNode>,
}

impl CartModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: x.len(),
            });
        }
        let mut i = 0;
        while let Some(rule) = self.nodes[i].split {
            i = if x[rule.feature] < rule.threshold { rule.left } else { rule.right };
        }
        Ok(self.nodes[i].value)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.split.is_none()).count()
    }

    pub fn is_leaf(&self) -> bool {
        self.nodes[0].split.is_none()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &CartModel, i: usize) -> usize {
            match t.nodes[i].split {
                None => 0,
                Some(r) => 1 + go(t, r.left).max(go(t, r.right)),
            }
        }
        go(self, 0)
    }

    /// Copy of the tree with every node in `collapse` turned into a leaf;
    /// unreachable nodes are dropped.
    fn collapsed(&self, collapse: &[bool]) -> CartModel {
        fn copy(src: &CartModel, collapse: &[bool], i: usize, out: &mut Vec<CartNode>) -> usize {
            let at = out.len();
            let node = &src.nodes[i];
            out.push(CartNode {
                split: None,
                ..node.clone()
            });
            if let (Some(rule), false) = (node.split, collapse[i]) {
                let left = copy(src, collapse, rule.left, out);
                let right = copy(src, collapse, rule.right, out);
                out[at].split = Some(SplitRule { left, right, ..rule });
            }
            at
        }
        let mut nodes = Vec::with_capacity(self.nodes.len());
        copy(self, collapse, 0, &mut nodes);
        CartModel {
            feature_dim: self.feature_dim,
            nodes,
        }
    }
}

fn sse_of(ys: &[f64], idx: &[usize]) -> (f64, f64) {
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| ys[i]).sum::<f64>() / n;
    let sse = idx.iter().map(|&i| (ys[i] - mean).powi(2)).sum();
    (mean, sse)
}

struct Grower<'a> {
    xs: &'a [Vec<f64>],
    ys: &'a [f64],
    params: &'a CartParams,
    nodes: Vec<CartNode>,
}

impl Grower<'_> {
    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let (value, sse) = sse_of(self.ys, &idx);
        let at = self.nodes.len();
        self.nodes.push(CartNode {
            value,
            count: idx.len(),
            sse,
            split: None,
        });
        let pure = sse <= 1e-12 * (1.0 + value * value) * idx.len() as f64;
        if pure || idx.len() < 2 * self.params.min_leaf || depth >= self.params.max_depth {
            return at;
        }
        if let Some((feature, threshold)) = self.best_split(&idx, value, sse) {
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.xs[i][feature] < threshold);
            let left = self.grow(l, depth + 1);
            let right = self.grow(r, depth + 1);
            self.nodes[at].split = Some(SplitRule {
                feature,
                threshold,
                left,
                right,
            });
        }
        at
    }

    /// Split maximizing the SSE reduction. Candidate thresholds are midpoints of
    /// consecutive distinct values; ties keep the lowest feature, then the
    /// lowest threshold.
    fn best_split(&self, idx: &[usize], mean: f64, parent_sse: f64) -> Option<(usize, f64)> {
        let n = idx.len();
        let min_leaf = self.params.min_leaf;
        let dim = self.xs[idx[0]].len();
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.to_vec();
        for f in 0..dim {
            order.sort_by(|&a, &b| self.xs[a][f].total_cmp(&self.xs[b][f]));
            // Deviations from the node mean keep the running sums well conditioned.
            let dev = |i: usize| self.ys[i] - mean;
            let total: f64 = order.iter().map(|&i| dev(i)).sum();
            let total_sq: f64 = order.iter().map(|&i| dev(i) * dev(i)).sum();
            let (mut s, mut sq) = (0.0, 0.0);
            for pos in 1..n {
                let y = dev(order[pos - 1]);
                s += y;
                sq += y * y;
                if pos < min_leaf || n - pos < min_leaf {
                    continue;
                }
                let lo = self.xs[order[pos - 1]][f];
                let hi = self.xs[order[pos]][f];
                if lo == hi {
                    continue;
                }
                let nl = pos as f64;
                let nr = (n - pos) as f64;
                let sse_l = (sq - s * s / nl).max(0.0);
                let sse_r = ((total_sq - sq) - (total - s).powi(2) / nr).max(0.0);
                let gain = parent_sse - sse_l - sse_r;
                if best.is_none_or(|(g, _, _)| gain > g) {
                    let mid = lo + (hi - lo) / 2.0;
                    let threshold = if mid > lo { mid } else { hi };
                    best = Some((gain, f, threshold));
                }
            }
        }
        // A split must strictly reduce impurity.
        let eps = 1e-10 * parent_sse.max(f64::MIN_POSITIVE);
        best.filter(|(g, _, _)| *g > eps).map(|(_, f, t)| (f, t))
    }
}

fn check_training(xs: &[Vec<f64>], ys: &[f64]) -> Result<usize> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::Validation(format!(
            "CART needs a nonempty training set with matching targets ({} inputs, {} targets)",
            xs.len(),
            ys.len()
        )));
    }
    let dim = xs[0].len();
    if let Some(bad) = xs.iter().find(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    if xs.iter().flatten().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Validation("CART training data must be finite".into()));
    }
    Ok(dim)
}

/// Grows the full tree without pruning.
pub fn grow(xs: &[Vec<f64>], ys: &[f64], params: &CartParams) -> Result<CartModel> {
    params.validate()?;
    let feature_dim = check_training(xs, ys)?;
    let mut g = Grower {
        xs,
        ys,
        params,
        nodes: Vec::new(),
    };
    g.grow((0..xs.len()).collect(), 0);
    Ok(CartModel {
        feature_dim,
        nodes: g.nodes,
    })
}

/// Nested subtrees produced by weakest-link pruning.
#[derive(Debug, Clone)]
pub struct PruningSequence {
    tree: CartModel,
    /// Complexity at which each node collapses into a leaf (infinite for leaves).
    collapse_at: Vec<f64>,
    /// Increasing thresholds; subtree `k` is optimal on `[alphas[k], alphas[k+1])`.
    pub alphas: Vec<f64>,
}

impl PruningSequence {
    pub fn new(tree: &CartModel) -> Self {
        let n = tree.nodes.len();
        let mut collapse_at = vec![f64::INFINITY; n];
        let mut pruned = vec![false; n];
        let mut alphas = vec![0.0];
        let mut current = 0.0f64;

        // (leaf sse sum, leaf count) of the current subtree rooted at i
        fn branch(t: &CartModel, pruned: &[bool], i: usize) -> (f64, usize) {
            match (t.nodes[i].split, pruned[i]) {
                (Some(r), false) => {
                    let (sl, nl) = branch(t, pruned, r.left);
                    let (sr, nr) = branch(t, pruned, r.right);
                    (sl + sr, nl + nr)
                }
                _ => (t.nodes[i].sse, 1),
            }
        }

        loop {
            let mut weakest = f64::INFINITY;
            let mut links = Vec::new();
            for i in 0..n {
                if tree.nodes[i].split.is_none() || pruned[i] || !reachable(tree, &pruned, i) {
                    continue;
                }
                let (r_branch, leaves) = branch(tree, &pruned, i);
                let g = ((tree.nodes[i].sse - r_branch) / (leaves - 1) as f64).max(0.0);
                links.push((i, g));
                weakest = weakest.min(g);
            }
            if links.is_empty() {
                break;
            }
            let tol = 1e-12 * (1.0 + weakest.abs());
            let alpha = weakest.max(current);
            for (i, g) in links {
                if g <= weakest + tol {
                    pruned[i] = true;
                    collapse_at[i] = alpha;
                }
            }
            if alpha > current {
                alphas.push(alpha);
                current = alpha;
            }
        }
        Self {
            tree: tree.clone(),
            collapse_at,
            alphas,
        }
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// Smallest optimal subtree for complexity `alpha`.
    pub fn subtree(&self, alpha: f64) -> CartModel {
        let collapse: Vec<bool> = self.collapse_at.iter().map(|&a| a <= alpha).collect();
        self.tree.collapsed(&collapse)
    }

    /// All subtrees, from the largest to the root leaf.
    pub fn subtrees(&self) -> Vec<CartModel> {
        self.alphas.iter().map(|&a| self.subtree(a)).collect()
    }
}

fn reachable(t: &CartModel, pruned: &[bool], target: usize) -> bool {
    let mut i = 0;
    loop {
        if i == target {
            return true;
        }
        if pruned[i] {
            return false;
        }
        // Walk toward `target`: node indices are assigned depth-first, so the
        // target lies in the right branch iff its index is at least `right`.
        match t.nodes[i].split {
            Some(r) => i = if target >= r.right { r.right } else { r.left },
            None => return false,
        }
    }
}

/// Cross-validated squared error of each subtree in the sequence of `tree`.
///
/// Folds are contiguous blocks in sample order. For subtree `k` each fold tree
/// is pruned at the geometric midpoint of `[alphas[k], alphas[k+1])`.
pub fn cv_costs(tree: &CartModel, xs: &[Vec<f64>], ys: &[f64], params: &CartParams) -> Result<(PruningSequence, Vec<f64>)> {
    params.validate()?;
    check_training(xs, ys)?;
    let seq = PruningSequence::new(tree);
    let n = xs.len();
    let folds = params.cv_folds.min(n);
    let probes: Vec<f64> = (0..seq.len())
        .map(|k| match seq.alphas.get(k + 1) {
            Some(next) => (seq.alphas[k] * next).sqrt(),
            None => f64::INFINITY,
        })
        .collect();
    let mut costs = vec![0.0; seq.len()];
    if folds < 2 {
        return Ok((seq, costs));
    }
    for v in 0..folds {
        let lo = v * n / folds;
        let hi = (v + 1) * n / folds;
        let (train_x, train_y): (Vec<Vec<f64>>, Vec<f64>) = (0..n)
            .filter(|i| *i < lo || *i >= hi)
            .map(|i| (xs[i].clone(), ys[i]))
            .unzip();
        let fold_seq = PruningSequence::new(&grow(&train_x, &train_y, params)?);
        for (k, &alpha) in probes.iter().enumerate() {
            let sub = fold_seq.subtree(alpha);
            for i in lo..hi {
                costs[k] += (ys[i] - sub.predict(&xs[i])?).powi(2);
            }
        }
    }
    for c in &mut costs {
        *c /= n as f64;
    }
    Ok((seq, costs))
}

/// Subtree with the lowest cross-validated cost. Ties go to the smaller tree.
pub fn prune(tree: &CartModel, xs: &[Vec<f64>], ys: &[f64], params: &CartParams) -> Result<CartModel> {
    if tree.is_leaf() {
        return Ok(tree.clone());
    }
    let (seq, costs) = cv_costs(tree, xs, ys, params)?;
    let mut best = 0;
    for (k, c) in costs.iter().enumerate() {
        if *c <= costs[best] {
            best = k;
        }
    }
    Ok(seq.subtree(seq.alphas[best]))
}

/// Grow then prune.
pub fn fit(xs: &[Vec<f64>], ys: &[f64], params: &CartParams) -> Result<CartModel> {
    let full = grow(xs, ys, params)?;
    prune(&full, xs, ys, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn step_fixture() -> (Vec<Vec<f64>>, Vec<f64>) {
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 19.0]).collect();
        let ys = xs.iter().map(|x| if x[0] < 0.5 { 0.0 } else { 1.0 }).collect();
        (xs, ys)
    }

    fn params(min_leaf: usize) -> CartParams {
        CartParams { min_leaf, ..Default::default() }
    }

    #[test]
    fn gini_fixtures() {
        assert_eq!(gini_impurity(&[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(gini_impurity(&[0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(gini_impurity(&[0.25; 4]).unwrap(), 0.75);
        assert!(gini_impurity(&[0.5, 0.6]).is_err());
        assert!(gini_impurity(&[1.5, -0.5]).is_err());
        assert!(gini_impurity(&[]).is_err());
    }

    #[test]
    fn constant_targets_give_single_leaf() {
        let xs: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let t = grow(&xs, &[4.2; 30], &params(1)).unwrap();
        assert!(t.is_leaf());
        assert!((t.predict(&[100.0, -3.0]).unwrap() - 4.2).abs() < 1e-12);
    }

    #[test]
    fn single_sample_is_leaf() {
        let t = fit(&[vec![0.3, 0.1]], &[9.0], &CartParams::default()).unwrap();
        assert!(t.is_leaf());
        assert_eq!(t.predict(&[0.0, 0.0]).unwrap(), 9.0);
    }

    // Exhaustive scan over every midpoint, independent of the grower.
    fn brute_force_threshold(xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        let mut vals: Vec<f64> = xs.iter().map(|x| x[0]).collect();
        vals.sort_by(f64::total_cmp);
        let mut best = (f64::INFINITY, 0.0);
        for w in vals.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let (l, r): (Vec<f64>, Vec<f64>) = xs.iter().zip(ys).map(|(x, y)| (x[0] < t, *y)).fold(
                (vec![], vec![]),
                |(mut l, mut r), (left, y)| {
                    if left { l.push(y) } else { r.push(y) }
                    (l, r)
                },
            );
            let sse = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|y| (y - m).powi(2)).sum::<f64>()
            };
            let cost = sse(&l) + sse(&r);
            if cost < best.0 {
                best = (cost, t);
            }
        }
        best.1
    }

    #[test]
    fn step_function_recovered() {
        let (xs, ys) = step_fixture();
        let t = grow(&xs, &ys, &params(1)).unwrap();
        assert_eq!(t.depth(), 1);
        let rule = t.nodes[0].split.unwrap();
        assert!(rule.threshold > 0.49 && rule.threshold < 0.51);
        assert_eq!(rule.threshold, brute_force_threshold(&xs, &ys));
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(t.predict(x).unwrap(), *y);
        }
        assert_eq!(t.predict(&[0.2]).unwrap(), 0.0);
        assert_eq!(t.predict(&[0.9]).unwrap(), 1.0);
        // ties route right
        assert_eq!(t.predict(&[rule.threshold]).unwrap(), 1.0);
        assert!(t.predict(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn pruning_keeps_step_split() {
        let (xs, ys) = step_fixture();
        let full = grow(&xs, &ys, &params(1)).unwrap();
        let (seq, costs) = cv_costs(&full, &xs, &ys, &params(1)).unwrap();
        assert_eq!(seq.len(), 2);
        assert!(costs[0] < costs[1], "{costs:?}");
        let pruned = prune(&full, &xs, &ys, &params(1)).unwrap();
        assert_eq!(pruned, full);
    }

    #[test]
    fn leaf_tree_unchanged_by_pruning() {
        let leaf = CartModel {
            feature_dim: 2,
            nodes: vec![CartNode { value: 42.0, count: 3, sse: 0.0, split: None }],
        };
        let pruned = prune(&leaf, &[vec![0.0, 0.0]], &[1.0], &CartParams::default()).unwrap();
        assert_eq!(pruned, leaf);
        assert_eq!(pruned.predict(&[5.0, 6.0]).unwrap(), 42.0);
    }

    fn random_fixture(seed: u64, n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect();
        let ys = (0..n).map(|_| rng.random::<f64>()).collect();
        (xs, ys)
    }

    #[test]
    fn noise_prunes_to_root_in_most_runs() {
        let mut root_count = 0;
        for seed in 0..20 {
            let (xs, ys) = random_fixture(seed, 100, 1);
            if fit(&xs, &ys, &CartParams::default()).unwrap().is_leaf() {
                root_count += 1;
            }
        }
        assert!(root_count > 10, "root selected in {root_count}/20 runs");
    }

    #[test]
    fn pruning_sequence_is_nested() {
        let (xs, ys) = random_fixture(3, 80, 3);
        let full = grow(&xs, &ys, &params(2)).unwrap();
        let seq = PruningSequence::new(&full);
        let subs = seq.subtrees();
        assert!(subs.last().unwrap().is_leaf());
        for w in subs.windows(2) {
            assert!(w[1].leaf_count() < w[0].leaf_count());
            // every split of the smaller tree is a split of the larger one
            for n in &w[1].nodes {
                if let Some(r) = n.split {
                    assert!(w[0].nodes.iter().any(|m| m.split.is_some_and(|s| s.feature == r.feature && s.threshold == r.threshold && m.count == n.count)));
                }
            }
        }
    }

    #[test]
    fn splits_strictly_reduce_impurity() {
        let (xs, ys) = random_fixture(9, 60, 2);
        let t = grow(&xs, &ys, &params(1)).unwrap();
        for n in &t.nodes {
            if let Some(r) = n.split {
                assert!(t.nodes[r.left].sse + t.nodes[r.right].sse < n.sse);
                assert_eq!(t.nodes[r.left].count + t.nodes[r.right].count, n.count);
            }
        }
    }

    #[test]
    fn respects_min_leaf_and_depth() {
        let (xs, ys) = random_fixture(5, 100, 2);
        let t = grow(&xs, &ys, &CartParams { min_leaf: 7, max_depth: 3, ..Default::default() }).unwrap();
        assert!(t.depth() <= 3);
        assert!(t.nodes.iter().filter(|n| n.split.is_none()).all(|n| n.count >= 7));
    }
}
