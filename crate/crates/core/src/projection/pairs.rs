//! Positive/negative pair construction for the three contrastive terms.

use std::collections::BTreeSet;

use rand::seq::index::sample_weighted;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ProjectionError;
use crate::corpus::{Corpus, Modality, NeighborLists};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairKind {
    /// image–image
    II,
    /// image–label
    IL,
    /// label–label
    LL,
}

impl PairKind {
    pub const ALL: [PairKind; 3] = [PairKind::II, PairKind::IL, PairKind::LL];

    pub fn index(self) -> usize {
        match self {
            PairKind::II => 0,
            PairKind::IL => 1,
            PairKind::LL => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PointRef {
    Image(usize),
    Label(usize),
}

/// One contrastive term: the candidate set is the positive followed by the negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub kind: PairKind,
    pub anchor: PointRef,
    pub positive: PointRef,
    pub negatives: Vec<PointRef>,
}

/// Anchors that could not produce an image–label term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingReport {
    /// Images without any label.
    pub isolated_images: usize,
    /// Images containing every label with positive frequency, so no negative exists.
    pub saturated_images: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub terms: Vec<Term>,
    /// Per-kind divisor of the summed term losses (the nominal anchor count).
    pub normalizers: [f64; 3],
    pub report: SamplingReport,
}

impl PairBatch {
    /// Batch whose per-kind normalizer is the number of terms of that kind.
    pub fn from_terms(terms: Vec<Term>) -> Self {
        let mut normalizers = [0.0; 3];
        for t in &terms {
            normalizers[t.kind.index()] += 1.0;
        }
        Self {
            terms,
            normalizers,
            report: SamplingReport::default(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn count(&self, kind: PairKind) -> usize {
        self.terms.iter().filter(|t| t.kind == kind).count()
    }

    /// Distinct points referenced anywhere in the batch, sorted.
    pub fn points(&self) -> Vec<PointRef> {
        let mut set = BTreeSet::new();
        for t in &self.terms {
            set.insert(t.anchor);
            set.insert(t.positive);
            set.extend(t.negatives.iter().copied());
        }
        set.into_iter().collect()
    }
}

/// Draws up to `m` distinct entries of `candidates` without replacement, with probability
/// proportional to `weights` (aligned with `candidates`). Zero-weight entries are never drawn.
pub fn sample_negatives<R: Rng + ?Sized>(candidates: &[usize], weights: &[f64], m: usize, rng: &mut R) -> Vec<usize> {
    let usable: Vec<(usize, f64)> = candidates
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0 && w.is_finite())
        .map(|(&c, &w)| (c, w))
        .collect();
    let take = m.min(usable.len());
    if take == 0 {
        return Vec::new();
    }
    if take == usable.len() {
        return usable.into_iter().map(|(c, _)| c).collect();
    }
    sample_weighted(rng, usable.len(), |i| usable[i].1, take)
        .expect("weights are positive and finite")
        .into_iter()
        .map(|i| usable[i].0)
        .collect()
}

/// Shared inputs for drawing batches.
#[derive(Debug, Clone, Copy)]
pub struct PairSource<'a, T> {
    pub corpus: &'a Corpus<T>,
    pub image_knn: &'a NeighborLists<T>,
    pub label_knn: &'a NeighborLists<T>,
    /// Label frequencies by label position.
    pub frequencies: &'a [f64],
    /// Negative labels per image–label term.
    pub m: usize,
}

impl<'a, T: Scalar> PairSource<'a, T> {
    pub fn new(
        corpus: &'a Corpus<T>,
        image_knn: &'a NeighborLists<T>,
        label_knn: &'a NeighborLists<T>,
        frequencies: &'a [f64],
        m: usize,
    ) -> Result<Self, ProjectionError> {
        if image_knn.modality != Modality::Image || image_knn.lists.len() != corpus.images.len() {
            return Err(ProjectionError::BadConfig("image kNN lists do not match corpus".into()));
        }
        if label_knn.modality != Modality::Label || label_knn.lists.len() != corpus.labels.len() {
            return Err(ProjectionError::BadConfig("label kNN lists do not match corpus".into()));
        }
        if frequencies.len() != corpus.labels.len() {
            return Err(ProjectionError::BadConfig("one frequency per label required".into()));
        }
        Ok(Self {
            corpus,
            image_knn,
            label_knn,
            frequencies,
            m,
        })
    }

    /// Builds the terms for the given anchors. `kinds` selects which terms are produced.
    pub fn batch<R: Rng + ?Sized>(
        &self,
        image_anchors: &[usize],
        label_anchors: &[usize],
        kinds: &[PairKind],
        rng: &mut R,
    ) -> PairBatch {
        let mut terms = Vec::new();
        let mut report = SamplingReport::default();
        let mut normalizers = [0.0; 3];
        let wants = |k: PairKind| kinds.contains(&k);

        if wants(PairKind::II) {
            normalizers[0] = image_anchors.len() as f64;
            terms.extend(same_modality_terms(
                PairKind::II,
                image_anchors,
                self.image_knn,
                PointRef::Image,
                rng,
            ));
        }
        if wants(PairKind::IL) {
            normalizers[1] = image_anchors.len() as f64;
            let graph = &self.corpus.graph;
            for &i in image_anchors {
                let contained = graph.labels_of(i);
                if contained.is_empty() {
                    report.isolated_images += 1;
                    continue;
                }
                let others: Vec<usize> = (0..self.corpus.labels.len())
                    .filter(|l| contained.binary_search(l).is_err())
                    .collect();
                let weights: Vec<f64> = others.iter().map(|&l| self.frequencies[l]).collect();
                let positive = contained[rng.random_range(0..contained.len())];
                let negatives = sample_negatives(&others, &weights, self.m, rng);
                if negatives.is_empty() {
                    report.saturated_images += 1;
                    continue;
                }
                terms.push(Term {
                    kind: PairKind::IL,
                    anchor: PointRef::Image(i),
                    positive: PointRef::Label(positive),
                    negatives: negatives.into_iter().map(PointRef::Label).collect(),
                });
            }
        }
        if wants(PairKind::LL) {
            normalizers[2] = label_anchors.len() as f64;
            terms.extend(same_modality_terms(
                PairKind::LL,
                label_anchors,
                self.label_knn,
                PointRef::Label,
                rng,
            ));
        }
        PairBatch {
            terms,
            normalizers,
            report,
        }
    }
}

/// Positives drawn uniformly from each anchor's kNN list; negatives are the other in-batch
/// points (anchors and positives) that are neither the anchor nor one of its neighbors.
fn same_modality_terms<T: Scalar, R: Rng + ?Sized>(
    kind: PairKind,
    anchors: &[usize],
    knn: &NeighborLists<T>,
    wrap: fn(usize) -> PointRef,
    rng: &mut R,
) -> Vec<Term> {
    let pairs: Vec<(usize, usize)> = anchors
        .iter()
        .filter_map(|&a| {
            let list = &knn.lists[a];
            if list.is_empty() {
                None
            } else {
                Some((a, list[rng.random_range(0..list.len())].0))
            }
        })
        .collect();
    let pool: BTreeSet<usize> = pairs.iter().flat_map(|&(a, p)| [a, p]).collect();
    pairs
        .iter()
        .map(|&(a, p)| Term {
            kind,
            anchor: wrap(a),
            positive: wrap(p),
            negatives: pool
                .iter()
                .copied()
                .filter(|&c| c != a && c != p && !knn.is_neighbor(a, c))
                .map(wrap)
                .collect(),
        })
        .collect()
}

/// One batch of all three kinds: `batch_size` random images (without replacement) and up to
/// `batch_size` random labels as anchors.
pub fn sample_pairs<T: Scalar>(source: &PairSource<'_, T>, batch_size: usize, seed: u64) -> Result<PairBatch, ProjectionError> {
    if batch_size == 0 {
        return Err(ProjectionError::BadConfig("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images: Vec<usize> = (0..source.corpus.images.len()).collect();
    images.shuffle(&mut rng);
    images.truncate(batch_size);
    let mut labels: Vec<usize> = (0..source.corpus.labels.len()).collect();
    labels.shuffle(&mut rng);
    labels.truncate(batch_size);
    Ok(source.batch(&images, &labels, &PairKind::ALL, &mut rng))
}
