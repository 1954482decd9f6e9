//! Contrastive and distance-order objectives on 2D coordinates.

use serde::{Deserialize, Serialize};

use super::{Layout, ProjectionError};
use crate::corpus::Corpus;
use crate::scalar::Scalar;

pub type Point<T> = [T; 2];

/// Similarity between two layout points used inside the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Cosine similarity of the coordinate vectors.
    #[default]
    Cosine,
    /// `1 / (1 + |a - b|^2)`, a heavy-tailed kernel on Euclidean distance.
    Cauchy,
}

impl Similarity {
    pub fn eval<T: Scalar>(self, a: Point<T>, b: Point<T>) -> T {
        self.eval_grad(a, b).0
    }

    /// Similarity and its gradients with respect to `a` and `b`.
    pub fn eval_grad<T: Scalar>(self, a: Point<T>, b: Point<T>) -> (T, Point<T>, Point<T>) {
        let zero = T::zero();
        match self {
            Similarity::Cosine => {
                let na2 = a[0] * a[0] + a[1] * a[1];
                let nb2 = b[0] * b[0] + b[1] * b[1];
                if na2 == zero || nb2 == zero {
                    return (zero, [zero; 2], [zero; 2]);
                }
                let (na, nb) = (na2.sqrt(), nb2.sqrt());
                let s = (a[0] * b[0] + a[1] * b[1]) / (na * nb);
                let inv = T::one() / (na * nb);
                let ga = [b[0] * inv - s * a[0] / na2, b[1] * inv - s * a[1] / na2];
                let gb = [a[0] * inv - s * b[0] / nb2, a[1] * inv - s * b[1] / nb2];
                (s, ga, gb)
            }
            Similarity::Cauchy => {
                let d = [a[0] - b[0], a[1] - b[1]];
                let s = T::one() / (T::one() + d[0] * d[0] + d[1] * d[1]);
                let c = T::lit(-2.0) * s * s;
                let ga = [c * d[0], c * d[1]];
                (s, ga, [-ga[0], -ga[1]])
            }
        }
    }
}

/// Gradient of one contrastive term with respect to the points involved.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGradient<T> {
    pub loss: T,
    pub anchor: Point<T>,
    /// One entry per candidate, aligned with the candidate list.
    pub candidates: Vec<Point<T>>,
}

/// `-log(exp(sim(a,p)/tau) / sum_c exp(sim(a,c)/tau))` where `candidates[positive]` is `p`.
pub fn contrastive_term<T: Scalar>(
    anchor: Point<T>,
    candidates: &[Point<T>],
    positive: usize,
    tau: T,
    similarity: Similarity,
) -> Result<PairGradient<T>, ProjectionError> {
    if candidates.is_empty() {
        return Err(ProjectionError::EmptyCandidates);
    }
    if positive >= candidates.len() {
        return Err(ProjectionError::BadConfig("positive index outside candidate list".into()));
    }
    if !(tau > T::zero()) {
        return Err(ProjectionError::BadConfig(format!("temperature must be positive, got {tau}")));
    }
    let evals: Vec<(T, Point<T>, Point<T>)> = candidates
        .iter()
        .map(|&c| similarity.eval_grad(anchor, c))
        .collect();
    let logits: Vec<T> = evals.iter().map(|e| e.0 / tau).collect();
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let weights: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = weights.iter().copied().sum();
    let loss = max + total.ln() - logits[positive];

    let mut anchor_grad = [T::zero(); 2];
    let mut cand_grads = Vec::with_capacity(candidates.len());
    for (t, ((_, ga, gc), w)) in evals.iter().zip(&weights).enumerate() {
        // dL/dz_t = softmax_t - [t == positive]; dz/dsim = 1/tau
        let mut coeff = *w / total;
        if t == positive {
            coeff -= T::one();
        }
        let coeff = coeff / tau;
        anchor_grad[0] += coeff * ga[0];
        anchor_grad[1] += coeff * ga[1];
        cand_grads.push([coeff * gc[0], coeff * gc[1]]);
    }
    Ok(PairGradient {
        loss,
        anchor: anchor_grad,
        candidates: cand_grads,
    })
}

/// Contrastive loss of one positive pair against a candidate set that contains the positive.
///
/// If `positive` occurs several times among `candidates`, the first occurrence is the positive.
pub fn contrastive_loss<T: Scalar>(
    anchor: Point<T>,
    positive: Point<T>,
    candidates: &[Point<T>],
    tau: T,
    similarity: Similarity,
) -> Result<T, ProjectionError> {
    if candidates.is_empty() {
        return Err(ProjectionError::EmptyCandidates);
    }
    match candidates.iter().position(|c| *c == positive) {
        Some(idx) => Ok(contrastive_term(anchor, candidates, idx, tau, similarity)?.loss),
        None => {
            let mut all = vec![positive];
            all.extend_from_slice(candidates);
            Ok(contrastive_term(anchor, &all, 0, tau, similarity)?.loss)
        }
    }
}

/// Value of the multi-modal distance-order objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderLoss<T> {
    pub value: T,
    /// Number of (label, image pair) comparisons that entered the numerator.
    pub compared_pairs: usize,
    /// Set when the edge set is empty and the loss is vacuously 0.
    pub vacuous: bool,
}

/// Order-violation penalty: 0 for agreeing orders, `|x|` otherwise.
#[inline]
fn violation<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::zero()
    } else {
        -x
    }
}

/// Label-neighborhoods: `(label index, [(image index, high-dimensional distance)])`.
pub type Neighborhoods<T> = Vec<(usize, Vec<(usize, T)>)>;

pub fn label_neighborhoods<T: Scalar>(corpus: &Corpus<T>) -> Neighborhoods<T> {
    (0..corpus.labels.len())
        .map(|l| {
            let imgs = corpus
                .graph
                .images_of(l)
                .iter()
                .map(|&i| (i, corpus.graph.weight(i, l).expect("edge present")))
                .collect();
            (l, imgs)
        })
        .collect()
}

/// Distance-order loss over label neighborhoods, given point lookups.
///
/// For every label, each pair of its images whose high- and low-dimensional distance
/// differences disagree in sign is penalized by the magnitude of their product; the sum
/// is normalized by the sum of squared low-dimensional image–label distances.
pub fn order_loss_points<T: Scalar>(
    neighborhoods: &Neighborhoods<T>,
    image_at: impl Fn(usize) -> Point<T>,
    label_at: impl Fn(usize) -> Point<T>,
) -> OrderLoss<T> {
    let mut numerator = T::zero();
    let mut denominator = T::zero();
    let mut compared = 0usize;
    let mut edges = 0usize;
    for (l, imgs) in neighborhoods {
        let lp = label_at(*l);
        let low: Vec<T> = imgs.iter().map(|&(i, _)| dist(image_at(i), lp)).collect();
        edges += imgs.len();
        for (a, &la) in low.iter().enumerate() {
            denominator += la * la;
            for b in a + 1..imgs.len() {
                numerator += violation((imgs[a].1 - imgs[b].1) * (la - low[b]));
                compared += 1;
            }
        }
    }
    let value = if denominator > T::zero() {
        numerator / denominator
    } else {
        T::zero()
    };
    OrderLoss {
        value,
        compared_pairs: compared,
        vacuous: edges == 0,
    }
}

/// Order loss and its gradient with respect to image and label coordinates.
pub fn order_loss_grad<T: Scalar>(
    neighborhoods: &Neighborhoods<T>,
    images: &[Point<T>],
    labels: &[Point<T>],
) -> (T, Vec<Point<T>>, Vec<Point<T>>) {
    let mut numerator = T::zero();
    let mut denominator = T::zero();
    let mut gi_num = vec![[T::zero(); 2]; images.len()];
    let mut gl_num = vec![[T::zero(); 2]; labels.len()];
    let mut gi_den = vec![[T::zero(); 2]; images.len()];
    let mut gl_den = vec![[T::zero(); 2]; labels.len()];
    for (l, imgs) in neighborhoods {
        let lp = labels[*l];
        // low-dimensional distance and its unit direction (image minus label)
        let low: Vec<(T, Point<T>)> = imgs
            .iter()
            .map(|&(i, _)| {
                let d = [images[i][0] - lp[0], images[i][1] - lp[1]];
                let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
                let u = if n > T::zero() { [d[0] / n, d[1] / n] } else { [T::zero(); 2] };
                (n, u)
            })
            .collect();
        for (a, &(la, ua)) in low.iter().enumerate() {
            denominator += la * la;
            // d(l^2) = 2 l u
            let two_l = T::lit(2.0) * la;
            let ia = imgs[a].0;
            gi_den[ia][0] += two_l * ua[0];
            gi_den[ia][1] += two_l * ua[1];
            gl_den[*l][0] -= two_l * ua[0];
            gl_den[*l][1] -= two_l * ua[1];
            for b in a + 1..imgs.len() {
                let dh = imgs[a].1 - imgs[b].1;
                let (lb, ub) = low[b];
                let x = dh * (la - lb);
                if x < T::zero() {
                    numerator -= x;
                    // d(-x) = -dh (dl_a - dl_b)
                    let ib = imgs[b].0;
                    let ca = -dh;
                    gi_num[ia][0] += ca * ua[0];
                    gi_num[ia][1] += ca * ua[1];
                    gi_num[ib][0] -= ca * ub[0];
                    gi_num[ib][1] -= ca * ub[1];
                    gl_num[*l][0] -= ca * (ua[0] - ub[0]);
                    gl_num[*l][1] -= ca * (ua[1] - ub[1]);
                }
            }
        }
    }
    if denominator <= T::zero() {
        return (T::zero(), vec![[T::zero(); 2]; images.len()], vec![[T::zero(); 2]; labels.len()]);
    }
    let value = numerator / denominator;
    let inv = T::one() / denominator;
    let q = value * inv;
    let combine = |num: Vec<Point<T>>, den: Vec<Point<T>>| -> Vec<Point<T>> {
        num.iter()
            .zip(&den)
            .map(|(n, d)| [n[0] * inv - q * d[0], n[1] * inv - q * d[1]])
            .collect()
    };
    (value, combine(gi_num, gi_den), combine(gl_num, gl_den))
}

fn dist<T: Scalar>(a: Point<T>, b: Point<T>) -> T {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    (d0 * d0 + d1 * d1).sqrt()
}

/// Distance-order loss of a complete layout against the corpus' edge weights.
pub fn order_loss<T: Scalar>(layout: &Layout<T>, corpus: &Corpus<T>) -> Result<OrderLoss<T>, ProjectionError> {
    layout.check_matches(corpus)?;
    Ok(order_loss_points(
        &label_neighborhoods(corpus),
        |i| layout.images[i],
        |l| layout.labels[l],
    ))
}

/// How the image–label and label–label terms are weighted against the image–image term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w_t = (L_t(now) / L_t(first epoch))^alpha`
    Balanced { alpha: f64 },
    Fixed { image_label: f64, label_label: f64 },
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::Balanced { alpha: 0.5 }
    }
}

/// Weights `(w_il, w_ll)` from per-epoch loss histories of the two weighted terms.
pub fn task_weights(image_label: &[f64], label_label: &[f64], weighting: &Weighting) -> (f64, f64) {
    match *weighting {
        Weighting::Fixed {
            image_label,
            label_label,
        } => (image_label, label_label),
        Weighting::Balanced { alpha } => {
            let ratio = |h: &[f64]| match (h.first(), h.last()) {
                (Some(&first), Some(&now)) if first > 0.0 && now.is_finite() && now >= 0.0 => (now / first).powf(alpha),
                _ => 1.0,
            };
            (ratio(image_label), ratio(label_label))
        }
    }
}
