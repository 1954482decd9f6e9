//! Neighborhood-preservation scores for joint layouts.
//!
//! Trustworthiness penalizes points that are near in the layout but far in the embedding
//! space; continuity penalizes the reverse. Both use rank penalties `max(0, rank - k)`
//! normalized by their worst case, so a score of 1 means no penalty.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Modality};
use crate::projection::{Layout, Point, ProjectionError};
use crate::scalar::{cosine_distance, Scalar};

pub const DEFAULT_K: usize = 30;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("k = {k} is too large for a population of {population}")]
    KTooLarge { k: usize, population: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("corpus has no edges")]
    NoEdges,
    #[error(transparent)]
    Layout(#[from] ProjectionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Images against images.
    Intra,
    /// Images against the label pool and labels against the image pool.
    Inter,
}

/// Largest achievable penalty sum for one query with `pool` candidates.
pub fn worst_case_penalty(pool: usize, k: usize) -> f64 {
    if k >= pool {
        return 0.0;
    }
    let (p, k) = (pool as f64, k as f64);
    if 2.0 * k <= p {
        k * (2.0 * p - 3.0 * k + 1.0) / 2.0
    } else {
        (p - k) * (p - k + 1.0) / 2.0
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Penalties {
    trust: f64,
    cont: f64,
    worst: f64,
}

/// Ranks (1-based) of every pool member, ties broken by index.
fn ranks(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let mut rank = vec![0; distances.len()];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r + 1;
    }
    rank
}

/// Accumulates penalties for queries against a pool, given per-query distance rows.
fn accumulate(
    queries: usize,
    k: usize,
    mut rows: impl FnMut(usize) -> (Vec<f64>, Vec<f64>),
    acc: &mut Penalties,
) {
    for q in 0..queries {
        let (high, low) = rows(q);
        let pool = high.len();
        if k >= pool {
            continue;
        }
        let rh = ranks(&high);
        let rl = ranks(&low);
        for j in 0..pool {
            let near_high = rh[j] <= k;
            let near_low = rl[j] <= k;
            if near_low && !near_high {
                acc.trust += (rh[j] - k) as f64;
            }
            if near_high && !near_low {
                acc.cont += (rl[j] - k) as f64;
            }
        }
        acc.worst += worst_case_penalty(pool, k);
    }
}

fn low_dist<T: Scalar>(a: Point<T>, b: Point<T>) -> f64 {
    let dx = (a[0] - b[0]).as_f64();
    let dy = (a[1] - b[1]).as_f64();
    (dx * dx + dy * dy).sqrt()
}

fn penalties<T: Scalar>(
    corpus: &Corpus<T>,
    layout: &Layout<T>,
    k: usize,
    mode: Mode,
) -> Result<Penalties, EvalError> {
    layout.check_matches(corpus)?;
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let mut acc = Penalties::default();
    match mode {
        Mode::Intra => {
            let n = corpus.images.len();
            if k >= n {
                return Err(EvalError::KTooLarge { k, population: n });
            }
            accumulate(
                n,
                k,
                |q| {
                    let others = (0..n).filter(|&j| j != q);
                    let high = others
                        .clone()
                        .map(|j| cosine_distance(&corpus.images[q].embedding, &corpus.images[j].embedding).as_f64())
                        .collect();
                    let low = others.map(|j| low_dist(layout.images[q], layout.images[j])).collect();
                    (high, low)
                },
                &mut acc,
            );
        }
        Mode::Inter => {
            let (ni, nl) = (corpus.images.len(), corpus.labels.len());
            if k > ni.max(nl) {
                return Err(EvalError::KTooLarge {
                    k,
                    population: ni.max(nl),
                });
            }
            let cross = |img: usize, lab: usize| {
                cosine_distance(&corpus.images[img].embedding, &corpus.labels[lab].embedding).as_f64()
            };
            accumulate(
                ni,
                k,
                |q| {
                    let high = (0..nl).map(|l| cross(q, l)).collect();
                    let low = (0..nl).map(|l| low_dist(layout.images[q], layout.labels[l])).collect();
                    (high, low)
                },
                &mut acc,
            );
            accumulate(
                nl,
                k,
                |q| {
                    let high = (0..ni).map(|i| cross(i, q)).collect();
                    let low = (0..ni).map(|i| low_dist(layout.labels[q], layout.images[i])).collect();
                    (high, low)
                },
                &mut acc,
            );
        }
    }
    Ok(acc)
}

fn score(penalty: f64, worst: f64) -> f64 {
    if worst <= 0.0 {
        1.0
    } else {
        (1.0 - penalty / worst).clamp(0.0, 1.0)
    }
}

pub fn trustworthiness<T: Scalar>(corpus: &Corpus<T>, layout: &Layout<T>, k: usize, mode: Mode) -> Result<f64, EvalError> {
    let p = penalties(corpus, layout, k, mode)?;
    Ok(score(p.trust, p.worst))
}

pub fn continuity<T: Scalar>(corpus: &Corpus<T>, layout: &Layout<T>, k: usize, mode: Mode) -> Result<f64, EvalError> {
    let p = penalties(corpus, layout, k, mode)?;
    Ok(score(p.cont, p.worst))
}

/// Both scores from one pass.
pub fn trust_and_continuity<T: Scalar>(
    corpus: &Corpus<T>,
    layout: &Layout<T>,
    k: usize,
    mode: Mode,
) -> Result<(f64, f64), EvalError> {
    let p = penalties(corpus, layout, k, mode)?;
    Ok((score(p.trust, p.worst), score(p.cont, p.worst)))
}

/// Mean over edges of `1 / (1 + d)`, `d` the layout distance between image and label.
pub fn ims<T: Scalar>(corpus: &Corpus<T>, layout: &Layout<T>) -> Result<f64, EvalError> {
    layout.check_matches(corpus)?;
    let edges = &corpus.graph.edges;
    if edges.is_empty() {
        return Err(EvalError::NoEdges);
    }
    let total: f64 = edges
        .iter()
        .map(|e| 1.0 / (1.0 + low_dist(layout.images[e.image], layout.labels[e.label])))
        .sum();
    Ok(total / edges.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub t_intra: f64,
    pub c_intra: f64,
    pub ims: f64,
    pub t_inter: f64,
    pub c_inter: f64,
}

impl EvalRow {
    /// Strictly better on IMS, inter-modal T and inter-modal C.
    pub fn dominates_inter(&self, other: &EvalRow) -> bool {
        self.ims > other.ims && self.t_inter > other.t_inter && self.c_inter > other.c_inter
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub k: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Aligned text table with intra- and inter-modal column groups.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let k = self.k;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>9}  {:>9}  {:>7}  {:>9}  {:>9}",
            "method",
            format!("T({k})"),
            format!("C({k})"),
            "IMS",
            format!("T({k})"),
            format!("C({k})"),
        );
        let _ = writeln!(s, "{:<width$}  {:^20}  {:^31}", "", "intra-modal", "inter-modal");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9.4}  {:>9.4}  {:>7.4}  {:>9.4}  {:>9.4}",
                r.method, r.t_intra, r.c_intra, r.ims, r.t_inter, r.c_inter
            );
        }
        s
    }
}

pub fn evaluate_layout<T: Scalar>(
    method: &str,
    corpus: &Corpus<T>,
    layout: &Layout<T>,
    k: usize,
) -> Result<EvalRow, EvalError> {
    let (t_intra, c_intra) = trust_and_continuity(corpus, layout, k, Mode::Intra)?;
    let (t_inter, c_inter) = trust_and_continuity(corpus, layout, k, Mode::Inter)?;
    Ok(EvalRow {
        method: method.to_string(),
        t_intra,
        c_intra,
        ims: ims(corpus, layout)?,
        t_inter,
        c_inter,
    })
}

pub fn compare<T: Scalar>(
    dataset: &str,
    methods: &[(String, Layout<T>)],
    corpus: &Corpus<T>,
    k: usize,
) -> Result<EvalReport, EvalError> {
    let rows = methods
        .iter()
        .map(|(name, layout)| evaluate_layout(name, corpus, layout, k))
        .collect::<Result<_, _>>()?;
    Ok(EvalReport {
        dataset: dataset.to_string(),
        k,
        rows,
    })
}

/// Which corpus population a mode's queries are drawn from; useful for sizing `k`.
pub fn population<T: Scalar>(corpus: &Corpus<T>, mode: Mode) -> usize {
    match mode {
        Mode::Intra => corpus.population(Modality::Image),
        Mode::Inter => corpus.population(Modality::Image).max(corpus.population(Modality::Label)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worst_case_matches_standard_normalizer() {
        // for P = N - 1 the per-query worst case is k(2N - 3k - 1)/2
        for n in [10usize, 50, 101] {
            for k in 1..n / 2 {
                let std = (k * (2 * n - 3 * k - 1)) as f64 / 2.0;
                assert_eq!(worst_case_penalty(n - 1, k), std);
            }
        }
        assert_eq!(worst_case_penalty(5, 5), 0.0);
        // P = 4, k = 3: one stranger at worst, penalty 4 - 3
        assert_eq!(worst_case_penalty(4, 3), 1.0);
    }

    #[test]
    fn worst_case_is_attained_by_reversal() {
        // low order is the exact reverse of the high order
        for p in 2..12usize {
            for k in 1..p {
                let high: Vec<f64> = (0..p).map(|j| j as f64).collect();
                let low: Vec<f64> = (0..p).map(|j| (p - j) as f64).collect();
                let mut acc = Penalties::default();
                accumulate(1, k, |_| (high.clone(), low.clone()), &mut acc);
                assert_eq!(acc.trust, acc.worst, "p={p} k={k}");
            }
        }
    }
}
