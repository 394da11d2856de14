//! Classification trees on categorical predictors for the MI-CART engine.
//!
//! Trees grow by greedy binary splits of a predictor's levels into a left
//! subset and its complement, minimizing weighted Gini impurity of the
//! target. Imputation routes a row to its leaf and samples a donor target
//! value from the leaf's fitting rows under Bayesian bootstrap weights.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::chained::{ConditionalEngine, ConditionalProblem};
use crate::data::Code;
use crate::error::EngineError;
use crate::rng::{sample_flat_dirichlet, sample_weighted};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartConfig {
    pub min_leaf: usize,
    pub cp: f64,
    /// Predictors with more distinct levels at a node than this are split
    /// by the ordering heuristic instead of exhaustive subset search.
    pub exhaustive_cap: usize,
}

impl Default for CartConfig {
    fn default() -> Self {
        CartConfig {
            min_leaf: 4,
            cp: 1e-4,
            exhaustive_cap: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        variable: usize,
        /// Membership of each level of `variable` in the left child.
        left_levels: Vec<bool>,
        /// Levels present among fitting rows at this node.
        seen_levels: Vec<bool>,
        /// Child that received more fitting rows; unseen levels go there.
        majority_left: bool,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        /// Fitting rows (indices into the data columns) in this leaf.
        rows: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub root: Node,
    pub min_leaf: usize,
    pub cp: f64,
    pub root_impurity: f64,
}

/// Gini impurity 1 − Σ p_c² of a class-count vector.
pub fn gini(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

/// Best left-level subset of one predictor at a node.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitCandidate {
    pub left_levels: Vec<bool>,
    /// Parent Gini minus the size-weighted Gini of the children.
    pub impurity_decrease: f64,
    /// Number of level partitions scanned.
    pub partitions_scanned: usize,
}

/// Per-level target counts for `predictor` over `rows`.
fn level_class_counts(
    rows: &[usize],
    predictor: &[Code],
    n_pred_levels: usize,
    target: &[Code],
    n_classes: usize,
) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0usize; n_classes]; n_pred_levels];
    for &i in rows {
        counts[predictor[i] as usize][target[i] as usize] += 1;
    }
    counts
}

fn children_impurity(left: &[usize], right: &[usize]) -> (f64, usize, usize) {
    let nl: usize = left.iter().sum();
    let nr: usize = right.iter().sum();
    let n = (nl + nr) as f64;
    ((nl as f64 * gini(left) + nr as f64 * gini(right)) / n, nl, nr)
}

/// Search the best binary partition of `predictor`'s levels at the node
/// holding `rows`. Returns `None` when fewer than two levels are present or
/// no partition leaves `min_leaf` rows on both sides.
#[allow(clippy::too_many_arguments)]
pub fn find_split(
    rows: &[usize],
    predictor: &[Code],
    n_pred_levels: usize,
    target: &[Code],
    n_classes: usize,
    min_leaf: usize,
    exhaustive_cap: usize,
) -> Option<SplitCandidate> {
    let counts = level_class_counts(rows, predictor, n_pred_levels, target, n_classes);
    let present: Vec<usize> = (0..n_pred_levels)
        .filter(|&l| counts[l].iter().any(|&c| c > 0))
        .collect();
    let m = present.len();
    if m < 2 {
        return None;
    }
    let mut parent = vec![0usize; n_classes];
    for l in &present {
        for c in 0..n_classes {
            parent[c] += counts[*l][c];
        }
    }
    let parent_gini = gini(&parent);

    let mut best: Option<(Vec<bool>, f64)> = None;
    let mut scanned = 0usize;
    let consider = |left_set: &[usize], best: &mut Option<(Vec<bool>, f64)>| {
        let mut left = vec![0usize; n_classes];
        for &l in left_set {
            for c in 0..n_classes {
                left[c] += counts[l][c];
            }
        }
        let right: Vec<usize> = parent.iter().zip(&left).map(|(p, l)| p - l).collect();
        let (child, nl, nr) = children_impurity(&left, &right);
        if nl < min_leaf || nr < min_leaf {
            return;
        }
        let decrease = parent_gini - child;
        if best.as_ref().is_none_or(|(_, d)| decrease > *d) {
            let mut mask = vec![false; n_pred_levels];
            for &l in left_set {
                mask[l] = true;
            }
            *best = Some((mask, decrease));
        }
    };

    if m <= exhaustive_cap {
        // subsets containing the first present level, excluding the full set:
        // 2^(m-1) - 1 distinct partitions
        let others = m - 1;
        for bits in 0..(1u64 << others) - 1 {
            let mut left_set = vec![present[0]];
            for (t, &l) in present[1..].iter().enumerate() {
                if bits >> t & 1 == 1 {
                    left_set.push(l);
                }
            }
            scanned += 1;
            consider(&left_set, &mut best);
        }
    } else {
        let modal = (0..n_classes)
            .max_by_key(|&c| (parent[c], std::cmp::Reverse(c)))
            .unwrap_or(0);
        let mut ordered = present.clone();
        let share = |l: usize| {
            let n: usize = counts[l].iter().sum();
            counts[l][modal] as f64 / n as f64
        };
        ordered.sort_by(|&a, &b| share(a).total_cmp(&share(b)).then(a.cmp(&b)));
        for cut in 1..m {
            scanned += 1;
            consider(&ordered[..cut], &mut best);
        }
    }
    best.map(|(left_levels, impurity_decrease)| SplitCandidate {
        left_levels,
        impurity_decrease,
        partitions_scanned: scanned,
    })
}

struct Builder<'a> {
    columns: &'a [Vec<Code>],
    level_counts: &'a [usize],
    target: &'a [Code],
    n_classes: usize,
    predictors: &'a [usize],
    cfg: &'a CartConfig,
    threshold: f64,
}

impl Builder<'_> {
    fn class_counts(&self, rows: &[usize]) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &i in rows {
            counts[self.target[i] as usize] += 1;
        }
        counts
    }

    fn grow(&self, rows: Vec<usize>) -> Node {
        if rows.len() < 2 * self.cfg.min_leaf || gini(&self.class_counts(&rows)) == 0.0 {
            return Node::Leaf { rows };
        }
        let mut best: Option<(usize, SplitCandidate)> = None;
        for &j in self.predictors {
            if let Some(cand) = find_split(
                &rows,
                &self.columns[j],
                self.level_counts[j],
                self.target,
                self.n_classes,
                self.cfg.min_leaf,
                self.cfg.exhaustive_cap,
            ) {
                if best
                    .as_ref()
                    .is_none_or(|(_, b)| cand.impurity_decrease > b.impurity_decrease)
                {
                    best = Some((j, cand));
                }
            }
        }
        let Some((variable, split)) = best else {
            return Node::Leaf { rows };
        };
        if split.impurity_decrease <= self.threshold {
            return Node::Leaf { rows };
        }
        let col = &self.columns[variable];
        let mut seen_levels = vec![false; self.level_counts[variable]];
        for &i in &rows {
            seen_levels[col[i] as usize] = true;
        }
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&i| split.left_levels[col[i] as usize]);
        let majority_left = left_rows.len() >= right_rows.len();
        Node::Split {
            variable,
            left_levels: split.left_levels,
            seen_levels,
            majority_left,
            left: Box::new(self.grow(left_rows)),
            right: Box::new(self.grow(right_rows)),
        }
    }
}

/// Grow a tree for `target` over `fit_rows`.
///
/// A split is kept when both children hold at least `min_leaf` rows and the
/// node's Gini decrease exceeds `cp` times the root Gini.
pub fn build_tree(
    columns: &[Vec<Code>],
    level_counts: &[usize],
    target: usize,
    predictors: &[usize],
    fit_rows: &[usize],
    cfg: &CartConfig,
) -> Tree {
    let n_classes = level_counts[target];
    let target_col = &columns[target];
    let mut root_counts = vec![0usize; n_classes];
    for &i in fit_rows {
        root_counts[target_col[i] as usize] += 1;
    }
    let root_impurity = gini(&root_counts);
    let builder = Builder {
        columns,
        level_counts,
        target: target_col,
        n_classes,
        predictors,
        cfg,
        threshold: cfg.cp * root_impurity,
    };
    Tree {
        root: builder.grow(fit_rows.to_vec()),
        min_leaf: cfg.min_leaf,
        cp: cfg.cp,
        root_impurity,
    }
}

impl Tree {
    /// Leaf reached by `row`, identified by its position in `leaves()`.
    pub fn route(&self, columns: &[Vec<Code>], row: usize) -> usize {
        let mut node = &self.root;
        let mut id = 0;
        loop {
            match node {
                Node::Leaf { .. } => return id,
                Node::Split {
                    variable,
                    left_levels,
                    seen_levels,
                    majority_left,
                    left,
                    right,
                } => {
                    let level = columns[*variable][row] as usize;
                    let go_left = if seen_levels[level] {
                        left_levels[level]
                    } else {
                        *majority_left
                    };
                    if go_left {
                        node = left;
                    } else {
                        id += count_leaves(left);
                        node = right;
                    }
                }
            }
        }
    }

    /// Leaf row pools in depth-first, left-first order.
    pub fn leaves(&self) -> Vec<&[usize]> {
        let mut out = Vec::new();
        collect_leaves(&self.root, &mut out);
        out
    }

    pub fn n_leaves(&self) -> usize {
        count_leaves(&self.root)
    }

    /// Accepted splits as (node size, parent Gini, weighted child Gini).
    pub fn split_impurities(&self, target: &[Code], n_classes: usize) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        split_stats(&self.root, target, n_classes, &mut out);
        out
    }
}

fn count_leaves(node: &Node) -> usize {
    match node {
        Node::Leaf { .. } => 1,
        Node::Split { left, right, .. } => count_leaves(left) + count_leaves(right),
    }
}

fn collect_leaves<'a>(node: &'a Node, out: &mut Vec<&'a [usize]>) {
    match node {
        Node::Leaf { rows } => out.push(rows),
        Node::Split { left, right, .. } => {
            collect_leaves(left, out);
            collect_leaves(right, out);
        }
    }
}

fn node_rows(node: &Node, out: &mut Vec<usize>) {
    match node {
        Node::Leaf { rows } => out.extend_from_slice(rows),
        Node::Split { left, right, .. } => {
            node_rows(left, out);
            node_rows(right, out);
        }
    }
}

fn split_stats(node: &Node, target: &[Code], n_classes: usize, out: &mut Vec<(usize, f64, f64)>) {
    if let Node::Split { left, right, .. } = node {
        let counts = |n: &Node| {
            let mut rows = Vec::new();
            node_rows(n, &mut rows);
            let mut c = vec![0usize; n_classes];
            for i in rows {
                c[target[i] as usize] += 1;
            }
            c
        };
        let (l, r) = (counts(left), counts(right));
        let parent: Vec<usize> = l.iter().zip(&r).map(|(a, b)| a + b).collect();
        let (child, nl, nr) = children_impurity(&l, &r);
        out.push((nl + nr, gini(&parent), child));
        split_stats(left, target, n_classes, out);
        split_stats(right, target, n_classes, out);
    }
}

/// Draw imputations for `impute_rows`: each leaf gets one set of Bayesian
/// bootstrap weights over its fitting rows, and each routed row takes the
/// target value of a donor sampled with those weights.
pub fn impute_from_tree<R: Rng + ?Sized>(
    tree: &Tree,
    columns: &[Vec<Code>],
    target: &[Code],
    n_classes: usize,
    impute_rows: &[usize],
    rng: &mut R,
) -> Vec<Code> {
    let leaves = tree.leaves();
    let routed: Vec<usize> = impute_rows.iter().map(|&i| tree.route(columns, i)).collect();
    let mut class_weights: Vec<Option<Vec<f64>>> = vec![None; leaves.len()];
    let mut out = Vec::with_capacity(impute_rows.len());
    for &leaf in &routed {
        if class_weights[leaf].is_none() {
            let pool = leaves[leaf];
            let w = sample_flat_dirichlet(pool.len(), rng);
            let mut per_class = vec![0.0; n_classes];
            for (&i, wi) in pool.iter().zip(w) {
                per_class[target[i] as usize] += wi;
            }
            class_weights[leaf] = Some(per_class);
        }
        let weights = class_weights[leaf].as_ref().expect("weights drawn above");
        out.push(sample_weighted(weights, rng) as Code);
    }
    out
}

/// MI-CART conditional engine.
#[derive(Debug, Clone, Default)]
pub struct CartEngine {
    pub config: CartConfig,
}

impl CartEngine {
    pub fn new(config: CartConfig) -> Self {
        CartEngine { config }
    }
}

impl ConditionalEngine for CartEngine {
    fn name(&self) -> &'static str {
        "cart"
    }

    fn fit_and_draw(&self, problem: &ConditionalProblem<'_>, rng: &mut dyn RngCore) -> Result<Vec<Code>, EngineError> {
        if problem.fit_rows.is_empty() {
            return Err(EngineError::NoObservedValues {
                variable: problem.target_name.to_string(),
            });
        }
        let predictors = problem.predictors();
        let tree = build_tree(
            problem.columns,
            problem.level_counts,
            problem.target,
            &predictors,
            problem.fit_rows,
            &self.config,
        );
        Ok(impute_from_tree(
            &tree,
            problem.columns,
            &problem.columns[problem.target],
            problem.target_levels(),
            problem.impute_rows,
            rng,
        ))
    }
}
