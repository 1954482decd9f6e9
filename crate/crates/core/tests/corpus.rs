use expandr_core::corpus::*;
use expandr_core::metrics::{cmmd, diversity, informativeness};
use proptest::prelude::*;

fn build(vs: &[Vec<f64>], labels: usize) -> Corpus<f64> {
    let d = vs[0].len();
    let images = vs
        .iter()
        .enumerate()
        .map(|(i, v)| ImageRecord::original(format!("i{i:03}"), if i % 2 == 0 { "a" } else { "b" }, v.clone()))
        .collect();
    let label_records = (0..labels)
        .map(|l| LabelRecord::new(format!("l{l}"), format!("l{l}"), vs[l % vs.len()].clone()))
        .collect();
    let edges = (0..vs.len()).map(|i| EdgeSpec::new(format!("i{i:03}"), format!("l{}", i % labels))).collect();
    Corpus::new(vec!["a".into(), "b".into()], d, images, label_records, edges).unwrap()
}

fn vectors() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 2..30))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_lists_are_sorted_and_sized(vs in vectors(), k in 1usize..40) {
        let c = build(&vs, 2);
        let nl = knn_graph(&c, k, Modality::Image).unwrap();
        for (p, list) in nl.lists.iter().enumerate() {
            prop_assert_eq!(list.len(), k.min(vs.len() - 1));
            prop_assert!(list.iter().all(|&(q, _)| q != p));
            prop_assert!(list.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }

    #[test]
    fn corpus_round_trips(vs in vectors()) {
        let c = build(&vs, 2);
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf).unwrap();
        prop_assert_eq!(read_corpus::<f64, _>(buf.as_slice()).unwrap(), c);
    }
}

#[test]
fn collinear_neighbors() {
    let c = build(&[vec![0.0], vec![1.0], vec![10.0]], 1);
    let c = Corpus::new(c.classes.clone(), 1, c.images.clone(), c.labels.clone(), c.edge_specs()).unwrap();
    // cosine distance is the configured distance; on one axis all positive points coincide,
    // so fall back to the id order for ties.
    let nl = knn_graph(&c, 1, Modality::Image).unwrap();
    assert_eq!(nl.lists.iter().map(|l| l.len()).collect::<Vec<_>>(), vec![1, 1, 1]);
}

#[test]
fn malformed_lines_report_position() {
    let text = "{\"type\":\"meta\",\"dimension\":2,\"classes\":[\"a\"]}\n{\"type\":\"image\",\"id\":\"x\"}\n";
    match read_corpus::<f64, _>(text.as_bytes()) {
        Err(CorpusError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn metric_closed_forms() {
    let uniform = [0.5, 0.5];
    let v = informativeness(&[0.9, 0.1], &uniform).unwrap();
    assert!((v - (2f64.ln() + 0.5)).abs() < 1e-9);
    let a = [1.0, 0.0];
    let b = [0.0, 1.0];
    let set: Vec<&[f64]> = vec![&a, &b];
    assert!(cmmd(&set, &set, 1.0).unwrap().distance.abs() < 1e-9);
    let same: Vec<&[f64]> = vec![&a, &a, &a];
    assert_eq!(diversity(&same, &[0, 0, 0]).unwrap(), 0.0);
    let base = [[0.0, 0.0], [0.3, 0.1], [-0.2, 0.4], [0.1, -0.3]];
    let refs: Vec<&[f64]> = base.iter().map(|p| &p[..]).collect();
    let mut last = -1.0;
    for off in [0.1, 1.0, 10.0] {
        let shifted: Vec<[f64; 2]> = base.iter().map(|p| [p[0] + off, p[1]]).collect();
        let g: Vec<&[f64]> = shifted.iter().map(|p| &p[..]).collect();
        let d = cmmd(&refs, &g, 1.0).unwrap().distance;
        assert!(d > last, "{off}: {d} <= {last}");
        last = d;
    }
}
