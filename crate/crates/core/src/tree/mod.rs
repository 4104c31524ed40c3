//! Balanced Gaussian search tree.
//!
//! The mixture is collapsed level by level into smaller mixtures (for example
//! 200 → 64 → 32 → … → 1) by clustering similar components and merging each
//! cluster into a single Gaussian. At run time a patch descends from the root,
//! following the child with the lowest selection score, so only a few
//! components are scored per patch instead of all `K`.

mod cluster;
mod format;

pub use cluster::{
    balanced_cluster, balanced_cluster_by_distance, collapse, partition_objective, symmetric_kl, MAX_SWAP_SWEEPS,
};
pub use format::{read_tree, tree_from_bytes, tree_to_bytes, write_tree};

use cluster::{collapse_dense, dense_precision, kl_matrix, DenseGaussian};

use crate::counters::OpCounter;
use crate::error::{check_dim, FepllError, Result};
use crate::gmm::{argmin_score, eigen_from_covariance, flatten_component, FlatTailComponent, GmmModel, ScoreContext};
use crate::linalg::sq_norm;

/// Cluster counts used for the 200-component natural-image prior.
pub const DEFAULT_LEVELS: [usize; 7] = [64, 32, 16, 8, 4, 2, 1];

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub component: FlatTailComponent,
    /// Indices into [`GmmTree::nodes`]; empty for leaves.
    pub children: Vec<usize>,
    /// Original component index for leaves.
    pub leaf_index: Option<usize>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Tree stored in breadth-first order; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmTree {
    nodes: Vec<TreeNode>,
    patch_dim: usize,
    leaf_count: usize,
    rho: f64,
}

impl GmmTree {
    pub fn from_nodes(nodes: Vec<TreeNode>, patch_dim: usize, leaf_count: usize, rho: f64) -> Result<Self> {
        let tree = Self { nodes, patch_dim, leaf_count, rho };
        tree.validate()?;
        Ok(tree)
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Node depth for every node (root = 0).
    pub fn depths(&self) -> Vec<usize> {
        let mut depth = vec![0; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &c in &node.children {
                depth[c] = depth[i] + 1;
            }
        }
        depth
    }

    /// Node count per depth, root first (e.g. `[1, 2, 4, …, 64, 200]`).
    pub fn level_sizes(&self) -> Vec<usize> {
        let depths = self.depths();
        let max = depths.iter().copied().max().unwrap_or(0);
        let mut sizes = vec![0; max + 1];
        for d in depths {
            sizes[d] += 1;
        }
        sizes
    }

    /// Worst-case number of scores evaluated by one descent.
    pub fn max_descent_cost(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            let n = &nodes[i];
            n.children.len() + n.children.iter().map(|&c| walk(nodes, c)).max().unwrap_or(0)
        }
        walk(&self.nodes, 0)
    }

    pub fn contexts(&self, beta: f64) -> Vec<ScoreContext<'_>> {
        self.nodes.iter().map(|n| ScoreContext::new(&n.component, beta)).collect()
    }

    /// Checks structure (BFS order, single parent, leaf bijection, branching)
    /// and weight conservation.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FepllError::Format(msg));
        if self.nodes.is_empty() {
            return bad("tree has no nodes".into());
        }
        let mut parent_seen = vec![false; self.nodes.len()];
        let mut leaf_seen = vec![false; self.leaf_count];
        for (i, node) in self.nodes.iter().enumerate() {
            check_dim(self.patch_dim, node.component.patch_dim())
                .map_err(|e| FepllError::Format(format!("node {i}: {e}")))?;
            match (node.is_leaf(), node.leaf_index) {
                (true, Some(k)) => {
                    if k >= self.leaf_count || leaf_seen[k] {
                        return bad(format!("leaf index {k} is out of range or repeated"));
                    }
                    leaf_seen[k] = true;
                }
                (true, None) => return bad(format!("leaf node {i} has no component index")),
                (false, Some(_)) => return bad(format!("internal node {i} carries a leaf index")),
                (false, None) => {
                    if node.children.len() < 2 {
                        return bad(format!("internal node {i} has fewer than two children"));
                    }
                    let total: f64 = node.children.iter().map(|&c| self.nodes.get(c).map_or(0.0, |n| n.component.weight())).sum();
                    if (total - node.component.weight()).abs() > 1e-12 {
                        return bad(format!("node {i} weight {} differs from its children's sum {total}", node.component.weight()));
                    }
                }
            }
            for &c in &node.children {
                if c <= i || c >= self.nodes.len() || parent_seen[c] {
                    return bad(format!("node {i} has invalid child {c}"));
                }
                parent_seen[c] = true;
            }
        }
        if parent_seen.iter().skip(1).any(|s| !s) {
            return bad("tree has unreachable nodes".into());
        }
        if leaf_seen.iter().any(|s| !s) {
            return bad(format!("tree leaves do not cover all {} components", self.leaf_count));
        }
        if (self.root().component.weight() - 1.0).abs() > 1e-12 {
            return bad(format!("root weight {} is not 1", self.root().component.weight()));
        }
        Ok(())
    }
}

/// Minimum cluster size at a given clustering level: 3 when grouping the
/// original components, 2 above, reduced when the level is too small for it.
pub fn min_cluster_size(level: usize, count: usize, clusters: usize) -> usize {
    let preferred = if level == 0 { 3 } else { 2 };
    preferred.min(count / clusters).max(1)
}

/// Default cluster counts for a `K`-component model: the largest power of two
/// not above `K / 3` (so clusters hold at least three components), then
/// halving down to one. For `K = 200` this gives `64, 32, …, 1`.
pub fn default_levels(k: usize) -> Vec<usize> {
    if k <= 1 {
        return Vec::new();
    }
    let mut first = 1usize;
    while 3 * first * 2 <= k {
        first *= 2;
    }
    let mut levels = vec![first];
    while *levels.last().unwrap() > 1 {
        let next = levels.last().unwrap() / 2;
        levels.push(next);
    }
    levels
}

/// Builds the search tree by repeated balanced clustering and collapse.
///
/// `level_sizes` lists the cluster counts from the level just above the leaves
/// up to the root (must be strictly decreasing and end at 1). Clustering and
/// merging use the covariances of `model` as given, densely; every node is
/// flattened at `rho` afterwards. A full-rank model therefore yields leaves
/// equal to `model.flattened(rho)`, which is the model to restore with. An
/// already flattened model keeps its components verbatim as leaves.
pub fn build_tree(model: &GmmModel, level_sizes: &[usize], rho: f64, seed: u64) -> Result<GmmTree> {
    let k = model.len();
    let p = model.patch_dim();
    if k > 1 {
        if level_sizes.is_empty() || *level_sizes.last().unwrap() != 1 {
            return Err(FepllError::InvalidInput("level sizes must end at 1".into()));
        }
        if level_sizes[0] >= k {
            return Err(FepllError::InvalidInput(format!(
                "first level size {} must be below the component count {k}",
                level_sizes[0]
            )));
        }
        if level_sizes.windows(2).any(|w| w[1] >= w[0]) {
            return Err(FepllError::InvalidInput("level sizes must be strictly decreasing".into()));
        }
    } else if !level_sizes.is_empty() {
        return Err(FepllError::InvalidInput("a single-component model takes no levels".into()));
    }

    // levels[0] = leaves; each later level has groups pointing into the previous one
    let mut dense: Vec<DenseGaussian> =
        model.components().iter().map(|c| DenseGaussian { weight: c.weight(), cov: c.covariance() }).collect();
    let leaves = if model.is_exact() && rho < 1.0 { model.flattened(rho)? } else { model.clone() };
    let mut levels: Vec<Vec<FlatTailComponent>> = vec![leaves.components().to_vec()];
    let mut groups_per_level: Vec<Vec<Vec<usize>>> = Vec::new();
    for (li, &clusters) in level_sizes.iter().enumerate() {
        let covs: Vec<_> = dense.iter().map(|g| g.cov.clone()).collect();
        let precs = covs.iter().map(dense_precision).collect::<Result<Vec<_>>>()?;
        let dist = kl_matrix(&covs, &precs);
        let min_size = min_cluster_size(li, dense.len(), clusters);
        let groups = balanced_cluster_by_distance(&dist, clusters, min_size, seed.wrapping_add(li as u64))?;
        dense = collapse_dense(&dense, &groups)?;
        levels.push(flatten_all(&dense, rho)?);
        groups_per_level.push(groups);
    }

    // breadth-first layout from the root
    let top = levels.len() - 1;
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut frontier: Vec<(usize, usize)> = vec![(top, 0)];
    while !frontier.is_empty() {
        let start = nodes.len();
        let mut next_frontier = Vec::new();
        let mut child_cursor = start + frontier.len();
        for &(level, idx) in &frontier {
            let component = levels[level][idx].clone();
            if level == 0 {
                nodes.push(TreeNode { component, children: Vec::new(), leaf_index: Some(idx) });
            } else {
                let kids = &groups_per_level[level - 1][idx];
                let children: Vec<usize> = (child_cursor..child_cursor + kids.len()).collect();
                child_cursor += kids.len();
                next_frontier.extend(kids.iter().map(|&c| (level - 1, c)));
                nodes.push(TreeNode { component, children, leaf_index: None });
            }
        }
        frontier = next_frontier;
    }
    GmmTree::from_nodes(nodes, p, k, rho)
}

fn flatten_all(items: &[DenseGaussian], rho: f64) -> Result<Vec<FlatTailComponent>> {
    items.iter().map(|g| flatten_component(g.weight, &eigen_from_covariance(&g.cov)?, rho)).collect()
}

/// Descends from the root, following the lowest-scoring child; returns the
/// leaf's original component index. `contexts` come from [`GmmTree::contexts`].
#[inline]
pub fn select_in_tree(tree: &GmmTree, contexts: &[ScoreContext<'_>], patch: &[f64], ops: &mut OpCounter) -> usize {
    let norm = sq_norm(patch);
    ops.select_mults += patch.len() as u64;
    let mut node = 0;
    loop {
        let n = &tree.nodes[node];
        if n.is_leaf() {
            return n.leaf_index.expect("validated leaf");
        }
        let pick = argmin_score(n.children.iter().map(|&c| (c, &contexts[c])), patch, norm, ops);
        node = pick;
    }
}

/// Tree-based Gaussian selection for one DC-removed patch.
pub fn tree_select(tree: &GmmTree, contexts: &[ScoreContext<'_>], patch: &[f64]) -> Result<usize> {
    check_dim(tree.patch_dim(), patch.len())?;
    if contexts.len() != tree.nodes().len() {
        return Err(FepllError::DimensionMismatch { expected: tree.nodes().len(), actual: contexts.len() });
    }
    Ok(select_in_tree(tree, contexts, patch, &mut OpCounter::default()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn diag_model(diags: &[Vec<f64>]) -> GmmModel {
        let w = 1.0 / diags.len() as f64;
        let entries: Vec<_> =
            diags.iter().map(|d| (w, DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)))).collect();
        GmmModel::from_covariances(diags[0].len(), &entries).unwrap()
    }

    #[test]
    fn two_components_make_a_root_with_two_leaves() {
        let model = diag_model(&[vec![1.0, 2.0], vec![3.0, 0.5]]);
        let tree = build_tree(&model, &[1], 1.0, 0).unwrap();
        assert_eq!(tree.nodes().len(), 3);
        assert_eq!(tree.root().children, vec![1, 2]);
        assert_eq!(tree.level_sizes(), vec![1, 2]);
    }

    #[test]
    fn single_leaf_tree_selects_it() {
        let model = diag_model(&[vec![1.0, 2.0]]);
        let tree = build_tree(&model, &[], 1.0, 0).unwrap();
        let ctx = tree.contexts(5.0);
        assert_eq!(tree_select(&tree, &ctx, &[0.3, -0.3]).unwrap(), 0);
    }

    #[test]
    fn level_validation() {
        let model = diag_model(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        assert!(build_tree(&model, &[2], 1.0, 0).is_err());
        assert!(build_tree(&model, &[4, 1], 1.0, 0).is_err());
        assert!(build_tree(&model, &[1, 2], 1.0, 0).is_err());
        assert!(build_tree(&model, &[2, 1], 1.0, 0).is_ok());
    }

    #[test]
    fn default_levels_follow_halving() {
        assert_eq!(default_levels(200), vec![64, 32, 16, 8, 4, 2, 1]);
        assert_eq!(default_levels(20), vec![4, 2, 1]);
        assert_eq!(default_levels(24), vec![8, 4, 2, 1]);
        assert_eq!(default_levels(8), vec![2, 1]);
        assert_eq!(default_levels(2), vec![1]);
        assert!(default_levels(1).is_empty());
    }

    #[test]
    fn min_size_prefers_three_for_leaf_level() {
        assert_eq!(min_cluster_size(0, 200, 64), 3);
        assert_eq!(min_cluster_size(1, 64, 32), 2);
        assert_eq!(min_cluster_size(0, 8, 4), 2);
    }
}
