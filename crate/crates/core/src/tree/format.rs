//! Binary tree files.
//!
//! Layout (little-endian): magic `FEPLLTR1`, `u32 node_count`, `u32 K`,
//! `u32 P`, `f64 rho`, then per node in breadth-first order the component
//! payload (same as model files), `u32 child_count`, the child indices as
//! `u32`, and `i32 leaf_index` (`-1` for internal nodes).

use std::path::Path;

use super::{GmmTree, TreeNode};
use crate::binio::{check_magic, put_f64, put_i32, put_u32, ByteReader};
use crate::error::{FepllError, Result};
use crate::gmm::{put_component, read_component, GmmModel};

const TREE_MAGIC: &[u8; 8] = b"FEPLLTR1";

pub fn tree_to_bytes(tree: &GmmTree) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TREE_MAGIC);
    put_u32(&mut out, tree.nodes().len() as u32);
    put_u32(&mut out, tree.leaf_count() as u32);
    put_u32(&mut out, tree.patch_dim() as u32);
    put_f64(&mut out, tree.rho());
    for node in tree.nodes() {
        put_component(&mut out, &node.component);
        put_u32(&mut out, node.children.len() as u32);
        for &c in &node.children {
            put_u32(&mut out, c as u32);
        }
        put_i32(&mut out, node.leaf_index.map_or(-1, |k| k as i32));
    }
    out
}

pub fn tree_from_bytes(bytes: &[u8]) -> Result<GmmTree> {
    let mut r = ByteReader::new(bytes);
    check_magic(&mut r, TREE_MAGIC)?;
    let count = r.u32()? as usize;
    let k = r.u32()? as usize;
    let p = r.u32()? as usize;
    let rho = r.f64()?;
    if count == 0 || k == 0 || p == 0 {
        return Err(FepllError::Format(format!("invalid tree header: {count} nodes, K={k}, P={p}")));
    }
    // every node takes at least 24 bytes; reject absurd counts before allocating
    if count > bytes.len() / 24 {
        return Err(FepllError::Format(format!("truncated file: {count} nodes declared")));
    }
    let mut nodes = Vec::with_capacity(count);
    for _ in 0..count {
        let component = read_component(&mut r, p)?;
        let n_children = r.u32()? as usize;
        if n_children > count {
            return Err(FepllError::Format(format!("node declares {n_children} children")));
        }
        let children = (0..n_children).map(|_| r.u32().map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
        let leaf = r.i32()?;
        let leaf_index = match leaf {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(FepllError::Format(format!("invalid leaf index {l}"))),
        };
        nodes.push(TreeNode { component, children, leaf_index });
    }
    r.finish()?;
    GmmTree::from_nodes(nodes, p, k, rho)
}

pub fn write_tree(tree: &GmmTree, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, tree_to_bytes(tree))?;
    Ok(())
}

pub fn read_tree(path: impl AsRef<Path>) -> Result<GmmTree> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    tree_from_bytes(&bytes).map_err(|e| match e {
        FepllError::Format(msg) => FepllError::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

impl GmmTree {
    /// Checks that the tree was built for `model`: same patch size, same
    /// component count and leaves identical to the model's components.
    pub fn check_matches(&self, model: &GmmModel) -> Result<()> {
        if self.patch_dim() != model.patch_dim() {
            return Err(FepllError::DimensionMismatch { expected: model.patch_dim(), actual: self.patch_dim() });
        }
        if self.leaf_count() != model.len() {
            return Err(FepllError::InvalidInput(format!(
                "tree has {} leaves but the model has {} components",
                self.leaf_count(),
                model.len()
            )));
        }
        for node in self.nodes() {
            if let Some(k) = node.leaf_index {
                if node.component != model.components()[k] {
                    return Err(FepllError::InvalidInput(format!(
                        "tree leaf {k} differs from model component {k} (tree flattened at rho = {}); rebuild the tree for this model", self.rho()
                    )));
                }
            }
        }
        Ok(())
    }
}
