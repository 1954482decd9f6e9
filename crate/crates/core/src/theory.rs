//! Executable checks of when label-to-image distance orders can be preserved in the plane.
//!
//! * Many-to-one graphs always admit a layout with zero order loss ([`construct_many_to_one_layout`]).
//! * `n` points in the plane induce at most `n(n-1)(n^2-n+2)/8 + 1` strict distance orders
//!   ([`order_bound`]); [`count_distance_orders`] enumerates them exactly.
//! * Many-to-many graphs may demand more orders than that ([`search_adversarial_instance`]).

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, EdgeSpec, ImageRecord, LabelRecord};
use crate::projection::loss::{label_neighborhoods, order_loss_grad, order_loss_points, Neighborhoods};
use crate::projection::{Layout, Point, ProjectionError};
use crate::scalar::Scalar;

/// Largest point count accepted by [`count_distance_orders`].
pub const MAX_ORDER_POINTS: usize = 7;

#[derive(Debug, thiserror::Error)]
pub enum TheoryError {
    #[error("points {0} and {1} coincide")]
    DegenerateInput(usize, usize),
    #[error("{0} points exceed the limit of {MAX_ORDER_POINTS}")]
    TooManyPoints(usize),
    #[error("point {0} is not finite")]
    NonFinite(usize),
    #[error("image {image} has {labels} labels; the graph is not many-to-one")]
    NotManyToOne { image: String, labels: usize },
    #[error("n must be at least {min}, got {n}")]
    TooFewPoints { n: usize, min: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
}

/// Maximum number of strict distance orders of `n` plane points, `n(n-1)(n^2-n+2)/8 + 1`.
pub fn order_bound(n: u64) -> u128 {
    let n = n as u128;
    if n == 0 {
        return 1;
    }
    n * (n - 1) * (n * n - n + 2) / 8 + 1
}

/// Ordered field operations needed by the arrangement enumeration.
pub trait ExactField:
    Clone
    + PartialOrd
    + Zero
    + One
    + Signed
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
}

impl<F> ExactField for F where
    F: Clone
        + PartialOrd
        + Zero
        + One
        + Signed
        + Add<Output = F>
        + Sub<Output = F>
        + Mul<Output = F>
        + Div<Output = F>
        + Neg<Output = F>
{
}

/// Line `a . q = b`.
#[derive(Debug, Clone, PartialEq)]
struct Line<F> {
    a: [F; 2],
    b: F,
}

impl<F: ExactField> Line<F> {
    /// Perpendicular bisector of `p` and `q`: `2(q - p) . x = |q|^2 - |p|^2`, scaled so the
    /// first nonzero coefficient of `a` is 1.
    fn bisector(p: &[F; 2], q: &[F; 2]) -> Self {
        let two = F::one() + F::one();
        let a = [two.clone() * (q[0].clone() - p[0].clone()), two * (q[1].clone() - p[1].clone())];
        let b = q[0].clone() * q[0].clone() + q[1].clone() * q[1].clone()
            - p[0].clone() * p[0].clone()
            - p[1].clone() * p[1].clone();
        let lead = if !a[0].is_zero() { a[0].clone() } else { a[1].clone() };
        Line {
            a: [a[0].clone() / lead.clone(), a[1].clone() / lead.clone()],
            b: b / lead,
        }
    }

    fn eval(&self, q: &[F; 2]) -> F {
        self.a[0].clone() * q[0].clone() + self.a[1].clone() * q[1].clone() - self.b.clone()
    }

    fn direction(&self) -> [F; 2] {
        [-self.a[1].clone(), self.a[0].clone()]
    }

    fn parallel(&self, other: &Line<F>) -> bool {
        (self.a[0].clone() * other.a[1].clone() - self.a[1].clone() * other.a[0].clone()).is_zero()
    }

    fn intersect(&self, other: &Line<F>) -> Option<[F; 2]> {
        let det = self.a[0].clone() * other.a[1].clone() - self.a[1].clone() * other.a[0].clone();
        if det.is_zero() {
            return None;
        }
        let x = (self.b.clone() * other.a[1].clone() - self.a[1].clone() * other.b.clone()) / det.clone();
        let y = (self.a[0].clone() * other.b.clone() - self.b.clone() * other.a[0].clone()) / det;
        Some([x, y])
    }
}

fn cross<F: ExactField>(u: &[F; 2], v: &[F; 2]) -> F {
    u[0].clone() * v[1].clone() - u[1].clone() * v[0].clone()
}

/// Angular comparison of direction vectors, starting at the positive x axis.
fn angle_cmp<F: ExactField>(u: &[F; 2], v: &[F; 2]) -> Ordering {
    let half = |w: &[F; 2]| {
        if w[1].is_positive() || (w[1].is_zero() && w[0].is_positive()) {
            0
        } else {
            1
        }
    };
    half(u).cmp(&half(v)).then_with(|| {
        let c = cross(u, v);
        if c.is_positive() {
            Ordering::Less
        } else if c.is_negative() {
            Ordering::Greater
        } else {
            Ordering::Equal
        }
    })
}

/// Strict distance order of `points` from `q`, or `None` on a tie.
fn strict_order<F: ExactField>(points: &[[F; 2]], q: &[F; 2]) -> Option<Vec<usize>> {
    let d: Vec<F> = points
        .iter()
        .map(|p| {
            let dx = p[0].clone() - q[0].clone();
            let dy = p[1].clone() - q[1].clone();
            dx.clone() * dx + dy.clone() * dy
        })
        .collect();
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).expect("ordered field"));
    if idx.windows(2).any(|w| d[w[0]] == d[w[1]]) {
        None
    } else {
        Some(idx)
    }
}

/// One sample point strictly inside every face of the arrangement of `lines`.
fn face_samples<F: ExactField>(lines: &[Line<F>]) -> Vec<[F; 2]> {
    if lines.is_empty() {
        return vec![[F::zero(), F::zero()]];
    }
    let all_parallel = lines.iter().all(|l| l.parallel(&lines[0]));
    if all_parallel {
        // After normalization parallel lines share `a`; walk along the normal.
        let a = lines[0].a.clone();
        let norm2 = a[0].clone() * a[0].clone() + a[1].clone() * a[1].clone();
        let mut offsets: Vec<F> = lines.iter().map(|l| l.b.clone()).collect();
        offsets.sort_by(|x, y| x.partial_cmp(y).expect("ordered field"));
        let two = F::one() + F::one();
        let mut cs = vec![offsets[0].clone() - F::one()];
        for w in offsets.windows(2) {
            cs.push((w[0].clone() + w[1].clone()) / two.clone());
        }
        cs.push(offsets[offsets.len() - 1].clone() + F::one());
        return cs
            .into_iter()
            .map(|c| {
                let s = c / norm2.clone();
                [a[0].clone() * s.clone(), a[1].clone() * s]
            })
            .collect();
    }

    let mut vertices: Vec<[F; 2]> = Vec::new();
    for i in 0..lines.len() {
        for j in i + 1..lines.len() {
            if let Some(v) = lines[i].intersect(&lines[j]) {
                if !vertices.contains(&v) {
                    vertices.push(v);
                }
            }
        }
    }
    let two = F::one() + F::one();
    let mut samples = Vec::new();
    for v in &vertices {
        let mut rays: Vec<[F; 2]> = Vec::new();
        let mut others: Vec<&Line<F>> = Vec::new();
        for l in lines {
            if l.eval(v).is_zero() {
                let d = l.direction();
                rays.push([-d[0].clone(), -d[1].clone()]);
                rays.push(d);
            } else {
                others.push(l);
            }
        }
        rays.sort_by(angle_cmp);
        for r in 0..rays.len() {
            let (r1, r2) = (&rays[r], &rays[(r + 1) % rays.len()]);
            let w = [r1[0].clone() + r2[0].clone(), r1[1].clone() + r2[1].clone()];
            // Largest step that stays clear of every line not through v.
            let mut limit: Option<F> = None;
            for l in &others {
                let slope = l.a[0].clone() * w[0].clone() + l.a[1].clone() * w[1].clone();
                if slope.is_zero() {
                    continue;
                }
                let t = -l.eval(v) / slope;
                if t.is_positive() && limit.as_ref().is_none_or(|m| t < *m) {
                    limit = Some(t);
                }
            }
            let eps = match limit {
                Some(t) => t / two.clone(),
                None => F::one(),
            };
            samples.push([v[0].clone() + eps.clone() * w[0].clone(), v[1].clone() + eps * w[1].clone()]);
        }
    }
    samples
}

/// Realized strict distance orders for a point set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderCertificate {
    pub n: usize,
    /// Each order lists point indices from nearest to farthest.
    pub realized_orders: BTreeSet<Vec<usize>>,
    pub bound: u128,
    /// Distinct perpendicular bisectors in the arrangement.
    pub bisectors: usize,
    /// Faces sampled (with repetition across vertices).
    pub samples: usize,
}

impl OrderCertificate {
    pub fn realized(&self) -> usize {
        self.realized_orders.len()
    }

    pub fn within_bound(&self) -> bool {
        (self.realized() as u128) <= self.bound
    }
}

/// Enumerates every strict distance order realizable from some query location in the plane,
/// exactly, over any ordered field.
pub fn count_distance_orders_exact<F: ExactField>(points: &[[F; 2]]) -> Result<OrderCertificate, TheoryError> {
    let n = points.len();
    if n > MAX_ORDER_POINTS {
        return Err(TheoryError::TooManyPoints(n));
    }
    for i in 0..n {
        for j in i + 1..n {
            if points[i] == points[j] {
                return Err(TheoryError::DegenerateInput(i, j));
            }
        }
    }
    let mut lines: Vec<Line<F>> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let l = Line::bisector(&points[i], &points[j]);
            if !lines.contains(&l) {
                lines.push(l);
            }
        }
    }
    let samples = face_samples(&lines);
    let realized: BTreeSet<Vec<usize>> = samples.iter().filter_map(|q| strict_order(points, q)).collect();
    Ok(OrderCertificate {
        n,
        realized_orders: realized,
        bound: order_bound(n as u64),
        bisectors: lines.len(),
        samples: samples.len(),
    })
}

/// Converts to exact rationals (every finite float is a rational) and enumerates.
pub fn count_distance_orders(points: &[[f64; 2]]) -> Result<OrderCertificate, TheoryError> {
    let exact = points
        .iter()
        .enumerate()
        .map(|(i, p)| match (BigRational::from_float(p[0]), BigRational::from_float(p[1])) {
            (Some(x), Some(y)) => Ok([x, y]),
            _ => Err(TheoryError::NonFinite(i)),
        })
        .collect::<Result<Vec<_>, _>>()?;
    count_distance_orders_exact(&exact)
}

/// Integer grid points as exact rationals.
pub fn integer_points(points: &[[i64; 2]]) -> Vec<[BigRational; 2]> {
    points
        .iter()
        .map(|p| {
            [
                BigRational::from_integer(BigInt::from(p[0])),
                BigRational::from_integer(BigInt::from(p[1])),
            ]
        })
        .collect()
}

/// Zero-order-loss layout for a many-to-one graph.
///
/// Each label sits at its own hub on the x axis; its images lie on the vertical ray above the
/// hub at radius `1 + dense rank` of their edge distance, so layout distances are small exact
/// integers that increase with the embedding distance. Hubs are `4 * max radius` apart.
/// Images without a label are parked on a ray below the first hub.
pub fn construct_many_to_one_layout<T: Scalar>(corpus: &Corpus<T>) -> Result<Layout<T>, TheoryError> {
    let graph = &corpus.graph;
    for (i, img) in corpus.images.iter().enumerate() {
        let n = graph.labels_of(i).len();
        if n > 1 {
            return Err(TheoryError::NotManyToOne {
                image: img.id.clone(),
                labels: n,
            });
        }
    }
    let mut radius = vec![0usize; corpus.images.len()];
    let mut max_radius = 1usize;
    for l in 0..corpus.labels.len() {
        let mut members: Vec<(usize, T)> = graph
            .images_of(l)
            .iter()
            .map(|&i| (i, graph.weight(i, l).expect("edge present")))
            .collect();
        members.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite weight").then(a.0.cmp(&b.0)));
        let mut rank = 0usize;
        for (pos, &(i, h)) in members.iter().enumerate() {
            if pos > 0 && h > members[pos - 1].1 {
                rank += 1;
            }
            radius[i] = rank + 1;
            max_radius = max_radius.max(rank + 1);
        }
    }
    let spacing = 4 * max_radius;
    let hub = |l: usize| T::from_count(l * spacing);
    let labels: Vec<Point<T>> = (0..corpus.labels.len()).map(|l| [hub(l), T::zero()]).collect();
    let mut parked = 0usize;
    let images: Vec<Point<T>> = (0..corpus.images.len())
        .map(|i| match graph.labels_of(i).first() {
            Some(&l) => [hub(l), T::from_count(radius[i])],
            None => {
                parked += 1;
                [T::zero(), -T::from_count(parked)]
            }
        })
        .collect();
    Ok(Layout::new(corpus, images, labels)?)
}

/// Random many-to-one corpus: every image contains at most one label; roughly one image in
/// ten contains none. Edge weights are the embedding distances.
pub fn random_many_to_one_corpus(images: usize, labels: usize, dimension: usize, seed: u64) -> Result<Corpus<f64>, TheoryError> {
    if labels == 0 || dimension == 0 {
        return Err(TheoryError::TooFewPoints { n: labels, min: 1 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vector = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dimension).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let label_records: Vec<LabelRecord<f64>> = (0..labels)
        .map(|l| LabelRecord::new(format!("l{l:02}"), format!("label {l}"), vector(&mut rng)))
        .collect();
    let mut image_records = Vec::new();
    let mut edges = Vec::new();
    for i in 0..images {
        let id = format!("i{i:03}");
        image_records.push(ImageRecord::original(id.clone(), "all", vector(&mut rng)));
        if rng.random_bool(0.9) {
            edges.push(EdgeSpec::new(id, format!("l{:02}", rng.random_range(0..labels))));
        }
    }
    Ok(Corpus::new(vec!["all".into()], dimension, image_records, label_records, edges)?)
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..n).collect();
    loop {
        out.push(current.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| current[j] > current[i - 1]).expect("successor exists");
        current.swap(i - 1, j);
        current[i..].reverse();
    }
}

/// `n` images and `n!` labels, each label connected to every image with distances that spell
/// out a distinct permutation (the image at position `r` of the permutation has distance `r + 1`).
pub fn adversarial_corpus(n: usize) -> Result<Corpus<f64>, TheoryError> {
    if n < 2 {
        return Err(TheoryError::TooFewPoints { n, min: 2 });
    }
    if n > MAX_ORDER_POINTS {
        return Err(TheoryError::TooManyPoints(n));
    }
    let images: Vec<ImageRecord<f64>> = (0..n)
        .map(|i| {
            let angle = i as f64;
            ImageRecord::original(format!("x{i}"), "all", vec![angle.cos(), angle.sin()])
        })
        .collect();
    let perms = permutations(n);
    let width = perms.len().to_string().len();
    let mut labels = Vec::new();
    let mut edges = Vec::new();
    for (p, perm) in perms.iter().enumerate() {
        let id = format!("y{p:0width$}");
        let angle = 0.5 + p as f64;
        labels.push(LabelRecord::new(id.clone(), perm.iter().map(|i| format!("x{i}")).collect::<Vec<_>>().join("<"), vec![angle.cos(), angle.sin()]));
        for (rank, &img) in perm.iter().enumerate() {
            edges.push(EdgeSpec {
                image: format!("x{img}"),
                label: id.clone(),
                weight: Some((rank + 1) as f64),
            });
        }
    }
    Ok(Corpus::new(vec!["all".into()], 2, images, labels, edges)?)
}

/// Distinct strict image orders demanded by labels connected to every image.
pub fn required_orders<T: Scalar>(corpus: &Corpus<T>) -> BTreeSet<Vec<usize>> {
    let n = corpus.images.len();
    let mut out = BTreeSet::new();
    for l in 0..corpus.labels.len() {
        let imgs = corpus.graph.images_of(l);
        if imgs.len() != n {
            continue;
        }
        let mut by_h: Vec<(usize, T)> = imgs
            .iter()
            .map(|&i| (i, corpus.graph.weight(i, l).expect("edge present")))
            .collect();
        by_h.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite weight"));
        if by_h.windows(2).all(|w| w[0].1 < w[1].1) {
            out.insert(by_h.into_iter().map(|(i, _)| i).collect());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrial {
    pub seed: u64,
    pub order_loss: f64,
    /// Labels whose strict image order is not reproduced by the final layout (ties count).
    pub violated_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialReport {
    pub images: usize,
    pub many_to_one: bool,
    /// Distinct full strict orders demanded by labels.
    pub required_orders: usize,
    pub bound: u128,
    pub exceeds_bound: bool,
    pub trials: Vec<SearchTrial>,
    /// Residual of the constructive layout for many-to-one graphs.
    pub constructive_residual: Option<f64>,
    pub note: String,
}

impl AdversarialReport {
    pub fn min_order_loss(&self) -> Option<f64> {
        self.trials.iter().map(|t| t.order_loss).reduce(f64::min)
    }

    /// Every search trial kept a positive loss and at least one violated label.
    pub fn all_trials_positive(&self) -> bool {
        !self.trials.is_empty() && self.trials.iter().all(|t| t.order_loss > 0.0 && t.violated_labels > 0)
    }
}

/// Settings of the layout search used as evidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { steps: 1000, lr: 0.01 }
    }
}

fn violated_labels(neighborhoods: &Neighborhoods<f64>, images: &[Point<f64>], labels: &[Point<f64>]) -> usize {
    neighborhoods
        .iter()
        .filter(|(l, imgs)| {
            let lp = labels[*l];
            let low: Vec<f64> = imgs
                .iter()
                .map(|&(i, _)| ((images[i][0] - lp[0]).powi(2) + (images[i][1] - lp[1]).powi(2)).sqrt())
                .collect();
            (0..imgs.len()).any(|a| {
                (a + 1..imgs.len()).any(|b| {
                    let dh = imgs[a].1 - imgs[b].1;
                    dh != 0.0 && dh * (low[a] - low[b]) <= 0.0
                })
            })
        })
        .count()
}

/// One seeded search: random layout, then gradient descent (Adam) on the order loss with the
/// layout renormalized to unit RMS radius after every step.
fn search_trial(neighborhoods: &Neighborhoods<f64>, n_images: usize, n_labels: usize, seed: u64, cfg: &SearchConfig) -> SearchTrial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = n_images + n_labels;
    let mut pts: Vec<Point<f64>> = (0..total)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let mut m = vec![[0.0; 2]; total];
    let mut v = vec![[0.0; 2]; total];
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let renorm = |pts: &mut Vec<Point<f64>>| {
        let n = pts.len() as f64;
        let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
        let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
        let rms = (pts.iter().map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sum::<f64>() / n).sqrt();
        let s = if rms > 0.0 { 1.0 / rms } else { 1.0 };
        for p in pts.iter_mut() {
            *p = [(p[0] - cx) * s, (p[1] - cy) * s];
        }
    };
    renorm(&mut pts);
    for step in 1..=cfg.steps {
        let (_, gi, gl) = order_loss_grad(neighborhoods, &pts[..n_images], &pts[n_images..]);
        let t = step as i32;
        for (k, g) in gi.iter().chain(&gl).enumerate() {
            for c in 0..2 {
                m[k][c] = b1 * m[k][c] + (1.0 - b1) * g[c];
                v[k][c] = b2 * v[k][c] + (1.0 - b2) * g[c] * g[c];
                let mh = m[k][c] / (1.0 - b1.powi(t));
                let vh = v[k][c] / (1.0 - b2.powi(t));
                pts[k][c] -= cfg.lr * mh / (vh.sqrt() + eps);
            }
        }
        renorm(&mut pts);
    }
    let (images, labels) = pts.split_at(n_images);
    let loss = order_loss_points(neighborhoods, |i| images[i], |l| labels[l]).value;
    SearchTrial {
        seed,
        order_loss: loss,
        violated_labels: violated_labels(neighborhoods, images, labels),
    }
}

/// Compares the orders a corpus demands with the planar bound and, for many-to-many graphs,
/// runs `trials` seeded layout searches. The search is evidence that no zero-loss layout
/// exists, not a proof.
pub fn search_adversarial_instance<T: Scalar>(
    corpus: &Corpus<T>,
    trials: usize,
    seed: u64,
    search: &SearchConfig,
) -> Result<AdversarialReport, TheoryError> {
    let n = corpus.images.len();
    let required = required_orders(corpus).len();
    let bound = order_bound(n as u64);
    let many_to_one = corpus.graph.is_many_to_one();
    let mut report = AdversarialReport {
        images: n,
        many_to_one,
        required_orders: required,
        bound,
        exceeds_bound: required as u128 > bound,
        trials: Vec::new(),
        constructive_residual: None,
        note: "search results are empirical evidence, not a proof".into(),
    };
    if many_to_one {
        let layout = construct_many_to_one_layout(corpus)?;
        let residual = crate::projection::order_loss(&layout, corpus)?.value.as_f64();
        report.constructive_residual = Some(residual);
        report.note = "many-to-one graph: constructive layout used instead of search".into();
        return Ok(report);
    }
    let corpus64 = corpus.cast::<f64>();
    let neighborhoods = label_neighborhoods(&corpus64);
    report.trials = (0..trials as u64)
        .map(|t| search_trial(&neighborhoods, n, corpus.labels.len(), seed.wrapping_add(t), search))
        .collect();
    Ok(report)
}
