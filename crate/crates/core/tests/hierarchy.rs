use expandr_core::corpus::{Corpus, EdgeSpec, ImageRecord, LabelRecord};
use expandr_core::hierarchy::*;
use expandr_core::providers::MockNamer;
use proptest::prelude::*;

fn labels_from(vectors: &[Vec<f64>]) -> Vec<LabelRecord<f64>> {
    vectors
        .iter()
        .enumerate()
        .map(|(i, v)| LabelRecord::new(format!("l{i:03}"), format!("label {i}"), v.clone()))
        .collect()
}

/// Independent cover check: every leaf lies under exactly one cut node, found by walking up.
fn covers_once(tree: &LabelTree<f64>, cut: &TreeCut) -> bool {
    (0..tree.leaf_count()).all(|leaf| {
        let mut hits = 0;
        let mut cur = Some(leaf);
        while let Some(n) = cur {
            if cut.nodes.contains(&n) {
                hits += 1;
            }
            cur = tree.nodes[n].parent;
        }
        hits == 1
    })
}

fn vectors() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cuts_are_antichain_covers(vs in vectors(), focus_pick in 0usize..1000, budget in 1usize..50) {
        let tree = build_hierarchy(&labels_from(&vs)).unwrap();
        let focus = focus_pick % tree.nodes.len();
        let cut = tree.tree_cut(focus, budget).unwrap();
        prop_assert!(covers_once(&tree, &cut));
        prop_assert!(tree.is_antichain_cover(&cut));
        prop_assert!(cut.nodes.len() <= budget.max(1));
        prop_assert_eq!(cut.nodes.len(), budget.min(tree.leaf_count()));
    }

    #[test]
    fn children_partition_parents(vs in vectors()) {
        let tree = build_hierarchy(&labels_from(&vs)).unwrap();
        prop_assert_eq!(tree.nodes.len(), 2 * vs.len() - 1);
        for n in &tree.nodes {
            if !n.is_leaf() {
                let mut m: Vec<usize> = n.children.iter().flat_map(|&c| tree.nodes[c].members.clone()).collect();
                m.sort_unstable();
                prop_assert_eq!(&m, &n.members);
            }
        }
        prop_assert_eq!(tree.nodes[tree.root()].members.len(), vs.len());
    }

    #[test]
    fn input_order_does_not_matter(vs in vectors(), rot in 0usize..40) {
        let labels = labels_from(&vs);
        let mut shuffled = labels.clone();
        shuffled.rotate_left(rot % labels.len());
        shuffled.reverse();
        prop_assert_eq!(build_hierarchy(&labels).unwrap(), build_hierarchy(&shuffled).unwrap());
    }
}

#[test]
fn budget_extremes() {
    let vs: Vec<Vec<f64>> = (0..9).map(|i| vec![(i as f64).cos(), (i as f64).sin(), 0.3]).collect();
    let tree = build_hierarchy(&labels_from(&vs)).unwrap();
    let leaf = 4;
    assert_eq!(tree.tree_cut(leaf, 1).unwrap().nodes, vec![tree.root()]);
    assert_eq!(tree.tree_cut(tree.root(), 9).unwrap().nodes, (0..9).collect::<Vec<_>>());
    assert_eq!(tree.tree_cut(leaf, 100).unwrap().nodes, (0..9).collect::<Vec<_>>());
    assert_eq!(tree.tree_cut(leaf, 0), Err(HierarchyError::ZeroBudget));
    assert_eq!(tree.tree_cut(99, 3), Err(HierarchyError::UnknownNode(99)));
    // The focus becomes visible once the budget allows it.
    let depth = tree.nodes[leaf].depth;
    assert!(tree.tree_cut(leaf, depth + 1).unwrap().nodes.contains(&leaf));
}

/// Four "wild" labels appear only in generated images, four "pet" labels only in originals.
fn planted() -> Corpus<f64> {
    let mut labels = Vec::new();
    for i in 0..4 {
        let t = i as f64 * 0.05;
        labels.push(LabelRecord::new(format!("wild{i}"), format!("wild {i}"), vec![1.0, t, 0.0]));
        labels.push(LabelRecord::new(format!("pet{i}"), format!("pet {i}"), vec![0.0, t, 1.0]));
    }
    let mut images = Vec::new();
    let mut edges = Vec::new();
    for n in 0..6 {
        let id = format!("gen{n}");
        images.push(ImageRecord::generated(id.clone(), "c", 1, vec![1.0, 0.0, 0.0]));
        for i in 0..4 {
            edges.push(EdgeSpec::new(id.clone(), format!("wild{i}")));
        }
    }
    for n in 0..8 {
        let id = format!("orig{n}");
        images.push(ImageRecord::original(id.clone(), "c", vec![0.0, 0.0, 1.0]));
        edges.push(EdgeSpec::new(id, format!("pet{}", n % 4)));
    }
    Corpus::new(vec!["c".into()], 3, images, labels, edges).unwrap()
}

#[test]
fn high_interest_subtree_expands_first() {
    let corpus = planted();
    let tree = LabelTree::from_corpus(&corpus).unwrap();
    let root = tree.root();
    let wild: Vec<usize> = (0..4).map(|i| tree.leaf_of(&format!("wild{i}")).unwrap()).collect();
    let pets = *tree.nodes[root].children.iter().find(|&&c| !wild.contains(&tree.nodes[c].members[0])).unwrap();
    assert_eq!(tree.nodes[pets].members.len(), 4);
    for b in 2..=5 {
        let cut = tree.tree_cut(root, b).unwrap();
        assert!(cut.nodes.contains(&pets), "budget {b}: {:?}", cut.nodes);
    }
    let mut expected = wild.clone();
    expected.push(pets);
    expected.sort_unstable();
    assert_eq!(tree.tree_cut(root, 5).unwrap().nodes, expected);
}

#[test]
fn counts_and_ratios() {
    let tree = LabelTree::from_corpus(&planted()).unwrap();
    let w = tree.leaf_of("wild0").unwrap();
    let p = tree.leaf_of("pet1").unwrap();
    assert_eq!((tree.nodes[w].original, tree.nodes[w].generated), (0, 6));
    assert_eq!((tree.nodes[p].original, tree.nodes[p].generated), (2, 0));
    assert_eq!(tree.api(w).unwrap(), 6.0);
    let root = &tree.nodes[tree.root()];
    assert_eq!((root.original, root.generated), (8, 6));
    for n in &tree.nodes {
        for &c in &n.children {
            assert!(n.original >= tree.nodes[c].original && n.generated >= tree.nodes[c].generated);
        }
    }
}

#[test]
fn nested_json_has_names_and_counts() {
    let mut tree = LabelTree::from_corpus(&planted()).unwrap();
    assert_eq!(tree.name_nodes(&MockNamer), 0);
    let v = tree.to_json();
    assert_eq!(v["id"], tree.root());
    assert_eq!(v["original_count"], 8);
    assert_eq!(v["children"].as_array().unwrap().len(), 2);
    fn leaves(v: &serde_json::Value) -> usize {
        let c = v["children"].as_array().unwrap();
        if c.is_empty() {
            assert!(v["label_id"].is_string());
            1
        } else {
            c.iter().map(leaves).sum()
        }
    }
    assert_eq!(leaves(&v), 8);
    let leaf = tree.leaf_of("pet2").unwrap();
    assert_eq!(tree.nodes[leaf].name, "pet 2");
}
