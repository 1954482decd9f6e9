use expandr_core::corpus::{Corpus, EdgeSpec, ImageRecord, LabelRecord};
use expandr_core::evaluate::*;
use expandr_core::projection::Layout;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn circle(theta: f64) -> Vec<f64> {
    vec![theta.cos(), theta.sin()]
}

/// Images on the unit circle (cosine distance is monotone in arc length, as is chord length)
/// plus a few labels, each image connected to the label at its angle bucket.
fn circle_corpus(angles: &[f64], labels: usize) -> Corpus<f64> {
    let images = angles
        .iter()
        .enumerate()
        .map(|(i, &a)| ImageRecord::original(format!("i{i:03}"), "c", circle(a)))
        .collect();
    let step = std::f64::consts::TAU / labels as f64;
    let label_records = (0..labels)
        .map(|l| LabelRecord::new(format!("l{l}"), format!("l{l}"), circle(l as f64 * step)))
        .collect();
    let edges = angles
        .iter()
        .enumerate()
        .map(|(i, &a)| EdgeSpec::new(format!("i{i:03}"), format!("l{}", ((a / step).round() as usize) % labels)))
        .collect();
    Corpus::new(vec!["c".into()], 2, images, label_records, edges).unwrap()
}

fn identity_layout(c: &Corpus<f64>) -> Layout<f64> {
    let pt = |v: &[f64]| [v[0], v[1]];
    Layout::new(
        c,
        c.images.iter().map(|r| pt(&r.embedding)).collect(),
        c.labels.iter().map(|r| pt(&r.embedding)).collect(),
    )
    .unwrap()
}

fn spaced_angles(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a: Vec<f64> = (0..n).map(|i| i as f64 * std::f64::consts::TAU / n as f64 * 0.999).collect();
    a.shuffle(&mut rng);
    a
}

#[test]
fn identity_projection_scores_one() {
    let c = circle_corpus(&spaced_angles(40, 1), 5);
    let l = identity_layout(&c);
    let (t, co) = trust_and_continuity(&c, &l, 10, Mode::Intra).unwrap();
    assert_eq!((t, co), (1.0, 1.0));
}

#[test]
fn shuffled_positions_score_lower() {
    for seed in 0..10 {
        let c = circle_corpus(&spaced_angles(100, seed), 6);
        let id = identity_layout(&c);
        let mut images = id.images.clone();
        images.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 100));
        let shuffled = Layout::new(&c, images, id.labels.clone()).unwrap();
        let ti = trustworthiness(&c, &id, 30, Mode::Intra).unwrap();
        let ts = trustworthiness(&c, &shuffled, 30, Mode::Intra).unwrap();
        assert!(ts < ti, "seed {seed}: {ts} vs {ti}");
    }
}

#[test]
fn saturated_k_scores_one() {
    let c = circle_corpus(&spaced_angles(12, 3), 3);
    let id = identity_layout(&c);
    let mut images = id.images.clone();
    images.reverse();
    let l = Layout::new(&c, images, id.labels.clone()).unwrap();
    let (t, co) = trust_and_continuity(&c, &l, 11, Mode::Intra).unwrap();
    assert_eq!((t, co), (1.0, 1.0));
    assert!(matches!(trustworthiness(&c, &l, 12, Mode::Intra), Err(EvalError::KTooLarge { .. })));
}

#[test]
fn images_on_their_label_are_trustworthy_across_modalities() {
    // Every image embedding equals its label's embedding and sits on the label in the layout.
    let labels: Vec<LabelRecord<f64>> = (0..6)
        .map(|l| LabelRecord::new(format!("l{l}"), format!("l{l}"), circle(l as f64 * 0.9)))
        .collect();
    let mut images = Vec::new();
    let mut edges = Vec::new();
    for i in 0..24 {
        let l = i % 6;
        images.push(ImageRecord::original(format!("i{i:02}"), "c", labels[l].embedding.clone()));
        edges.push(EdgeSpec::new(format!("i{i:02}"), format!("l{l}")));
    }
    let c = Corpus::new(vec!["c".into()], 2, images, labels, edges).unwrap();
    let l = identity_layout(&c);
    assert_eq!(trustworthiness(&c, &l, 3, Mode::Inter).unwrap(), 1.0);
    assert_eq!(ims(&c, &l).unwrap(), 1.0);
}

#[test]
fn collapsing_a_cluster_hurts_trust_more() {
    let mut angles: Vec<f64> = (0..15).map(|i| 0.01 * i as f64).collect();
    angles.extend((0..15).map(|i| 1.5 + 0.01 * i as f64));
    angles.extend((0..15).map(|i| 3.0 + 0.01 * i as f64));
    let c = circle_corpus(&angles, 3);
    let id = identity_layout(&c);
    let mut images = id.images.clone();
    for p in images.iter_mut().take(15) {
        // drop the first cluster onto the second
        let a = 1.5 + (p[1].atan2(p[0]));
        *p = [a.cos(), a.sin()];
    }
    let l = Layout::new(&c, images, id.labels.clone()).unwrap();
    let (t, co) = trust_and_continuity(&c, &l, 10, Mode::Intra).unwrap();
    assert!(co >= t, "C {co} T {t}");
    assert!(t < 1.0);
}

#[test]
fn ims_closed_forms() {
    let c = circle_corpus(&[0.0, 0.1], 1);
    let l = Layout::new(&c, vec![[1.0, 0.0], [0.0, 1.0]], vec![[0.0, 0.0]]).unwrap();
    assert!((ims(&c, &l).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn identical_layouts_give_identical_rows() {
    let c = circle_corpus(&spaced_angles(40, 9), 4);
    let l = identity_layout(&c);
    let r = compare("toy", &[("a".into(), l.clone()), ("b".into(), l)], &c, 5).unwrap();
    assert_eq!(
        (r.rows[0].t_intra, r.rows[0].c_intra, r.rows[0].ims, r.rows[0].t_inter, r.rows[0].c_inter),
        (r.rows[1].t_intra, r.rows[1].c_intra, r.rows[1].ims, r.rows[1].t_inter, r.rows[1].c_inter)
    );
    assert!(r.to_table().contains("T(5)"));
}

fn transform(p: [f64; 2], angle: f64, scale: f64, shift: (f64, f64)) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [scale * (c * p[0] - s * p[1]) + shift.0, scale * (s * p[0] + c * p[1]) + shift.1]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_in_unit_interval_and_similarity_invariant(
        pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 30),
        angle in 0.0f64..6.3,
        scale in 0.5f64..4.0,
        shift in (-10.0f64..10.0, -10.0f64..10.0),
        seed in 0u64..1000,
        k in 1usize..10,
    ) {
        let c = circle_corpus(&spaced_angles(30, seed), 4);
        let images: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
        let labels: Vec<[f64; 2]> = (0..4).map(|i| [i as f64, -(i as f64)]).collect();
        let l = Layout::new(&c, images.clone(), labels.clone()).unwrap();
        let moved = Layout::new(
            &c,
            images.iter().map(|&p| transform(p, angle, scale, shift)).collect(),
            labels.iter().map(|&p| transform(p, angle, scale, shift)).collect(),
        ).unwrap();
        for mode in [Mode::Intra, Mode::Inter] {
            let k = if mode == Mode::Inter { k.min(3) } else { k };
            let (t, co) = trust_and_continuity(&c, &l, k, mode).unwrap();
            prop_assert!((0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&co));
            let (t2, c2) = trust_and_continuity(&c, &moved, k, mode).unwrap();
            prop_assert!((t - t2).abs() < 1e-9 && (co - c2).abs() < 1e-9, "{mode:?}: {t} {t2} {co} {c2}");
        }
        let s = ims(&c, &l).unwrap();
        prop_assert!(s > 0.0 && s <= 1.0);
    }
}
