//! Agglomerative label hierarchy, degree-of-interest scoring and tree cuts.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{Corpus, ImageKind, LabelRecord};
use crate::providers::NamingProvider;
use crate::scalar::{cosine_distance, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HierarchyError {
    #[error("a hierarchy needs at least one label")]
    Empty,
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("tree-cut budget must be at least 1")]
    ZeroBudget,
    #[error("label {0} has an embedding of the wrong length")]
    DimensionMismatch(String),
    #[error("label {0} is not in the corpus")]
    UnknownLabel(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode<T = f64> {
    pub id: usize,
    pub parent: Option<usize>,
    /// Empty for leaves, two entries for inner nodes.
    pub children: Vec<usize>,
    /// Leaf indices under this node, ascending.
    pub members: Vec<usize>,
    pub centroid: Vec<T>,
    pub name: String,
    /// Set when the name is a placeholder because naming failed.
    pub placeholder: bool,
    pub depth: usize,
    /// Original images containing any member label.
    pub original: usize,
    /// Generated images containing any member label.
    pub generated: usize,
}

impl<T> TreeNode<T> {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Binary merge tree over labels. Leaves `0..L` are the labels sorted by id; inner nodes are
/// numbered from `L` in merge order, so the root is the last node.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTree<T = f64> {
    pub nodes: Vec<TreeNode<T>>,
    /// Label id of each leaf.
    pub label_ids: Vec<String>,
    /// Label text and frequency of each leaf.
    pub label_texts: Vec<String>,
    pub frequencies: Vec<usize>,
}

/// Average-linkage agglomerative clustering under cosine distance.
///
/// The closest pair of clusters is merged first; equal distances are resolved by the smallest
/// label index in either cluster, so the result depends only on the label ids, not the input
/// order.
pub fn build_hierarchy<T: Scalar>(labels: &[LabelRecord<T>]) -> Result<LabelTree<T>, HierarchyError> {
    if labels.is_empty() {
        return Err(HierarchyError::Empty);
    }
    let mut sorted: Vec<&LabelRecord<T>> = labels.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let dim = sorted[0].embedding.len();
    if let Some(bad) = sorted.iter().find(|l| l.embedding.len() != dim) {
        return Err(HierarchyError::DimensionMismatch(bad.id.clone()));
    }
    let l = sorted.len();
    let mut nodes: Vec<TreeNode<T>> = sorted
        .iter()
        .enumerate()
        .map(|(i, r)| TreeNode {
            id: i,
            parent: None,
            children: Vec::new(),
            members: vec![i],
            centroid: r.embedding.clone(),
            name: r.text.clone(),
            placeholder: false,
            depth: 0,
            original: 0,
            generated: 0,
        })
        .collect();

    // Active clusters: node id -> row in the distance matrix.
    let mut dist: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            (0..l)
                .map(|j| cosine_distance(&sorted[i].embedding, &sorted[j].embedding).as_f64())
                .collect()
        })
        .collect();
    let mut active: Vec<usize> = (0..l).collect(); // node ids, row index == position in `row_of`
    let mut row_of: HashMap<usize, usize> = (0..l).map(|i| (i, i)).collect();
    let mut size = vec![1usize; l];

    while active.len() > 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for (ai, &a) in active.iter().enumerate() {
            for &b in &active[ai + 1..] {
                let d = dist[row_of[&a]][row_of[&b]];
                let (ka, kb) = (nodes[a].members[0], nodes[b].members[0]);
                let key = (d, ka.min(kb), ka.max(kb));
                let better = match best {
                    None => true,
                    Some((bd, b1, b2, _, _)) => key.0 < bd || (key.0 == bd && (key.1, key.2) < (b1, b2)),
                };
                if better {
                    best = Some((key.0, key.1, key.2, a, b));
                }
            }
        }
        let (_, _, _, a, b) = best.expect("at least two active clusters");
        let (a, b) = if nodes[a].members[0] < nodes[b].members[0] { (a, b) } else { (b, a) };
        let (ra, rb) = (row_of[&a], row_of[&b]);
        let (na, nb) = (size[ra] as f64, size[rb] as f64);
        // Lance-Williams update for average linkage; the merged cluster reuses row `ra`.
        for &c in &active {
            if c == a || c == b {
                continue;
            }
            let rc = row_of[&c];
            let d = (na * dist[ra][rc] + nb * dist[rb][rc]) / (na + nb);
            dist[ra][rc] = d;
            dist[rc][ra] = d;
        }
        size[ra] += size[rb];

        let id = nodes.len();
        let mut members: Vec<usize> = nodes[a].members.iter().chain(&nodes[b].members).copied().collect();
        members.sort_unstable();
        let centroid = (0..dim)
            .map(|j| members.iter().map(|&m| sorted[m].embedding[j]).sum::<T>() / T::from_count(members.len()))
            .collect();
        nodes[a].parent = Some(id);
        nodes[b].parent = Some(id);
        nodes.push(TreeNode {
            id,
            parent: None,
            children: vec![a, b],
            members,
            centroid,
            name: format!("node-{id}"),
            placeholder: true,
            depth: 0,
            original: 0,
            generated: 0,
        });
        active.retain(|&c| c != a && c != b);
        active.push(id);
        row_of.remove(&a);
        row_of.remove(&b);
        row_of.insert(id, ra);
    }

    // Depths from the root down; children always have smaller ids than their parent.
    for id in (0..nodes.len()).rev() {
        if let Some(p) = nodes[id].parent {
            nodes[id].depth = nodes[p].depth + 1;
        }
    }
    Ok(LabelTree {
        nodes,
        label_ids: sorted.iter().map(|r| r.id.clone()).collect(),
        label_texts: sorted.iter().map(|r| r.text.clone()).collect(),
        frequencies: sorted.iter().map(|r| r.frequency).collect(),
    })
}

impl<T: Scalar> LabelTree<T> {
    /// Hierarchy over the corpus labels with image counts filled in.
    pub fn from_corpus(corpus: &Corpus<T>) -> Result<Self, HierarchyError> {
        let mut tree = build_hierarchy(&corpus.labels)?;
        tree.count_images(corpus)?;
        Ok(tree)
    }

    /// Sets each node's original/generated counts to the images containing any member label.
    pub fn count_images(&mut self, corpus: &Corpus<T>) -> Result<(), HierarchyError> {
        let positions: Vec<usize> = self
            .label_ids
            .iter()
            .map(|id| corpus.label_position(id).ok_or_else(|| HierarchyError::UnknownLabel(id.clone())))
            .collect::<Result<_, _>>()?;
        for node in &mut self.nodes {
            let images: BTreeSet<usize> = node
                .members
                .iter()
                .flat_map(|&m| corpus.graph.images_of(positions[m]).iter().copied())
                .collect();
            node.original = images.iter().filter(|&&i| corpus.images[i].kind == ImageKind::Original).count();
            node.generated = images.len() - node.original;
        }
        Ok(())
    }
}

impl<T> LabelTree<T> {
    pub fn root(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn leaf_count(&self) -> usize {
        self.label_ids.len()
    }

    pub fn node(&self, id: usize) -> Result<&TreeNode<T>, HierarchyError> {
        self.nodes.get(id).ok_or(HierarchyError::UnknownNode(id))
    }

    /// Leaf node of a label id.
    pub fn leaf_of(&self, label_id: &str) -> Option<usize> {
        self.label_ids.binary_search_by(|l| l.as_str().cmp(label_id)).ok()
    }

    pub fn is_ancestor(&self, ancestor: usize, node: usize) -> bool {
        let mut cur = self.nodes[node].parent;
        while let Some(p) = cur {
            if p == ancestor {
                return true;
            }
            cur = self.nodes[p].parent;
        }
        false
    }

    /// Number of edges on the tree path between two nodes.
    pub fn tree_distance(&self, a: usize, b: usize) -> Result<usize, HierarchyError> {
        self.node(a)?;
        self.node(b)?;
        let (mut x, mut y, mut steps) = (a, b, 0);
        while x != y {
            if self.nodes[x].depth >= self.nodes[y].depth {
                x = self.nodes[x].parent.expect("non-root has a parent");
            } else {
                y = self.nodes[y].parent.expect("non-root has a parent");
            }
            steps += 1;
        }
        Ok(steps)
    }

    /// Generated-to-original ratio; a node without originals divides by one instead.
    pub fn api(&self, id: usize) -> Result<f64, HierarchyError> {
        let n = self.node(id)?;
        Ok(n.generated as f64 / n.original.max(1) as f64)
    }

    /// Raw degree of interest: `api(node) - tree_distance(node, focus)`.
    pub fn doi(&self, node: usize, focus: usize) -> Result<f64, HierarchyError> {
        Ok(self.api(node)? - self.tree_distance(node, focus)? as f64)
    }

    /// Degree of interest of every node with the API rescaled to `[0, max distance from focus]`
    /// before the tree distance is subtracted.
    pub fn scaled_doi(&self, focus: usize) -> Result<Vec<f64>, HierarchyError> {
        self.node(focus)?;
        let api: Vec<f64> = (0..self.nodes.len()).map(|i| self.api(i)).collect::<Result<_, _>>()?;
        let td: Vec<usize> = (0..self.nodes.len())
            .map(|i| self.tree_distance(i, focus))
            .collect::<Result<_, _>>()?;
        let range = *td.iter().max().unwrap_or(&0) as f64;
        let lo = api.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = api.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(api
            .iter()
            .zip(&td)
            .map(|(&a, &t)| {
                let scaled = if hi > lo { (a - lo) / (hi - lo) * range } else { 0.0 };
                scaled - t as f64
            })
            .collect())
    }

    /// Greedy tree cut under a display budget.
    ///
    /// Starting from the root, nodes on the path to the focus are expanded first so the focus
    /// becomes visible; afterwards the cut node with the highest scaled DOI is replaced by its
    /// children (ties by smaller id) as long as the cut stays within the budget.
    pub fn tree_cut(&self, focus: usize, budget: usize) -> Result<TreeCut, HierarchyError> {
        if budget == 0 {
            return Err(HierarchyError::ZeroBudget);
        }
        let doi = self.scaled_doi(focus)?;
        let mut cut: BTreeSet<usize> = BTreeSet::from([self.root()]);
        let mut path = Vec::new();
        let mut cur = self.nodes[focus].parent;
        while let Some(p) = cur {
            path.push(p);
            cur = self.nodes[p].parent;
        }
        let expand = |cut: &mut BTreeSet<usize>, id: usize| {
            cut.remove(&id);
            cut.extend(self.nodes[id].children.iter().copied());
        };
        for &a in path.iter().rev() {
            if cut.len() + 1 > budget {
                break;
            }
            expand(&mut cut, a);
        }
        while cut.len() < budget {
            let next = cut
                .iter()
                .copied()
                .filter(|&id| !self.nodes[id].is_leaf())
                .max_by(|&a, &b| doi[a].total_cmp(&doi[b]).then(b.cmp(&a)));
            match next {
                Some(id) => expand(&mut cut, id),
                None => break,
            }
        }
        Ok(TreeCut {
            nodes: cut.into_iter().collect(),
            focus,
        })
    }

    /// True when no cut node is an ancestor of another and every leaf is covered exactly once.
    pub fn is_antichain_cover(&self, cut: &TreeCut) -> bool {
        let mut covered = vec![0usize; self.leaf_count()];
        for &id in &cut.nodes {
            let Some(node) = self.nodes.get(id) else {
                return false;
            };
            for &m in &node.members {
                covered[m] += 1;
            }
        }
        let antichain = cut
            .nodes
            .iter()
            .all(|&a| cut.nodes.iter().all(|&b| a == b || !self.is_ancestor(a, b)));
        antichain && covered.iter().all(|&c| c == 1)
    }

    /// Names inner nodes from their members' texts and frequencies. Nodes whose request fails
    /// keep the `node-{id}` placeholder and stay flagged; returns how many failed.
    pub fn name_nodes(&mut self, namer: &dyn NamingProvider) -> usize {
        let mut failed = 0;
        for node in self.nodes.iter_mut().filter(|n| !n.children.is_empty()) {
            let members: Vec<(String, usize)> = node
                .members
                .iter()
                .map(|&m| (self.label_texts[m].clone(), self.frequencies[m]))
                .collect();
            match namer.name(&members) {
                Ok(name) => {
                    node.name = name;
                    node.placeholder = false;
                }
                Err(_) => {
                    node.name = format!("node-{}", node.id);
                    node.placeholder = true;
                    failed += 1;
                }
            }
        }
        failed
    }

    fn node_json(&self, id: usize) -> Value {
        let n = &self.nodes[id];
        let children: Vec<Value> = n.children.iter().map(|&c| self.node_json(c)).collect();
        let mut v = json!({
            "id": n.id,
            "name": n.name,
            "original_count": n.original,
            "generated_count": n.generated,
            "ratio": n.generated as f64 / n.original.max(1) as f64,
            "children": children,
        });
        if n.is_leaf() {
            v["label_id"] = json!(self.label_ids[n.members[0]]);
        }
        if n.placeholder {
            v["placeholder"] = json!(true);
        }
        v
    }

    /// Nested `{id, name, original_count, generated_count, ratio, children}` objects from the
    /// root; leaves also carry `label_id`.
    pub fn to_json(&self) -> Value {
        self.node_json(self.root())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeCut {
    /// Node ids, ascending.
    pub nodes: Vec<usize>,
    pub focus: usize,
}
