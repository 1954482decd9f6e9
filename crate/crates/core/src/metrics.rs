//! Dataset-quality metrics tracked per generation iteration: informativeness,
//! diversity and distance (CLIP-space MMD).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, ImageKind, PREDICTION_SUM_TOLERANCE};
use crate::scalar::{euclidean, softmax, squared_euclidean, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("empty class or empty input")]
    EmptyClass,
    #[error("need at least 2 samples per set, got {originals} originals and {generated} generated")]
    TooFewSamples { originals: usize, generated: usize },
    #[error("image `{0}` (or the originals of its class) has no prediction")]
    MissingPredictions(String),
    #[error("no generated images up to iteration {0}")]
    MissingGenerated(u32),
    #[error("timeline iteration {got} does not follow {last}")]
    NonIncreasingIteration { last: u32, got: u32 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn check_distribution<T: Scalar>(p: &[T]) -> Result<(), MetricsError> {
    if p.is_empty() {
        return Err(MetricsError::NotADistribution("empty vector".into()));
    }
    if p.iter().any(|&x| !(x >= T::zero()) || !x.is_finite()) {
        return Err(MetricsError::NotADistribution("negative or non-finite entry".into()));
    }
    let sum = p.iter().copied().sum::<T>().as_f64();
    if (sum - 1.0).abs() > PREDICTION_SUM_TOLERANCE {
        return Err(MetricsError::NotADistribution(format!("sums to {sum}")));
    }
    Ok(())
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy<T: Scalar>(p: &[T]) -> T {
    p.iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| -x * x.ln())
        .sum()
}

/// `D_KL(p || q)` in nats. Terms with `p_i = 0` contribute nothing.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> T {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > T::zero())
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// Index of the largest entry; first one wins on ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Informativeness of one generated image: `Entropy(p') + p'_j` with `j = argmax(p)`.
pub fn informativeness<T: Scalar>(p_original: &[T], p_generated: &[T]) -> Result<T, MetricsError> {
    check_distribution(p_original)?;
    check_distribution(p_generated)?;
    if p_original.len() != p_generated.len() {
        return Err(MetricsError::NotADistribution(format!(
            "class counts differ: {} vs {}",
            p_original.len(),
            p_generated.len()
        )));
    }
    let j = argmax(p_original);
    Ok(entropy(p_generated) + p_generated[j])
}

/// Mean informativeness over `(p, p')` pairs.
pub fn mean_informativeness<T: Scalar>(pairs: &[(&[T], &[T])]) -> Result<T, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyClass);
    }
    let mut total = T::zero();
    for (p, q) in pairs {
        total += informativeness(p, q)?;
    }
    Ok(total / T::from_count(pairs.len()))
}

/// Mean KL distance of softmaxed features to the softmaxed class-mean feature,
/// averaged over images of a class and then over classes.
pub fn diversity<T: Scalar, C: Ord>(embeddings: &[&[T]], classes: &[C]) -> Result<T, MetricsError> {
    if embeddings.is_empty() {
        return Err(MetricsError::EmptyClass);
    }
    if embeddings.len() != classes.len() {
        return Err(MetricsError::InvalidArgument(format!(
            "{} embeddings but {} class assignments",
            embeddings.len(),
            classes.len()
        )));
    }
    let mut groups: BTreeMap<&C, Vec<&[T]>> = BTreeMap::new();
    for (v, c) in embeddings.iter().zip(classes) {
        groups.entry(c).or_default().push(v);
    }
    let mut total = T::zero();
    for members in groups.values() {
        total += class_diversity(members)?;
    }
    Ok(total / T::from_count(groups.len()))
}

fn class_diversity<T: Scalar>(members: &[&[T]]) -> Result<T, MetricsError> {
    let dim = members[0].len();
    if members.iter().any(|m| m.len() != dim) {
        return Err(MetricsError::InvalidArgument("embedding lengths differ".into()));
    }
    let n = T::from_count(members.len());
    let mut mean = vec![T::zero(); dim];
    for m in members {
        for (acc, &x) in mean.iter_mut().zip(m.iter()) {
            *acc += x;
        }
    }
    mean.iter_mut().for_each(|x| *x /= n);
    let center = softmax(&mean);
    let total: T = members
        .iter()
        .map(|m| kl_divergence(&softmax(m), &center))
        .sum();
    // KL is non-negative; rounding can produce -1e-17.
    Ok((total / n).max(T::zero()))
}

/// Kernel bandwidth choice for [`cmmd`]-style evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise Euclidean distance over the union of both sets.
    #[default]
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmmdResult<T> {
    /// `sqrt(max(0, squared))`.
    pub distance: T,
    /// The unbiased estimate before clamping; may be slightly negative.
    pub squared: T,
    pub clamped: bool,
    pub sigma: T,
}

/// Median pairwise Euclidean distance of the union; falls back to 1 when it is 0.
pub fn median_bandwidth<T: Scalar>(a: &[&[T]], b: &[&[T]]) -> T {
    let all: Vec<&[T]> = a.iter().chain(b).copied().collect();
    let mut dists = Vec::with_capacity(all.len() * all.len().saturating_sub(1) / 2);
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            dists.push(euclidean(all[i], all[j]));
        }
    }
    if dists.is_empty() {
        return T::one();
    }
    dists.sort_by(|x, y| x.partial_cmp(y).expect("finite distance"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        (dists[mid - 1] + dists[mid]) / T::lit(2.0)
    };
    if median > T::zero() {
        median
    } else {
        T::one()
    }
}

/// Unbiased Gaussian-kernel MMD between the original and generated embeddings.
pub fn cmmd<T: Scalar>(originals: &[&[T]], generated: &[&[T]], sigma: T) -> Result<CmmdResult<T>, MetricsError> {
    let (n, m) = (originals.len(), generated.len());
    if n < 2 || m < 2 {
        return Err(MetricsError::TooFewSamples {
            originals: n,
            generated: m,
        });
    }
    if !(sigma > T::zero()) {
        return Err(MetricsError::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let denom = T::lit(2.0) * sigma * sigma;
    let kernel = |x: &[T], y: &[T]| (-squared_euclidean(x, y) / denom).exp();
    let within = |set: &[&[T]]| {
        let mut s = T::zero();
        for i in 0..set.len() {
            for j in 0..set.len() {
                if i != j {
                    s += kernel(set[i], set[j]);
                }
            }
        }
        let k = T::from_count(set.len());
        s / (k * (k - T::one()))
    };
    let mut cross = T::zero();
    for x in originals {
        for y in generated {
            cross += kernel(x, y);
        }
    }
    let cross = T::lit(2.0) * cross / (T::from_count(n) * T::from_count(m));
    let squared = within(originals) - cross + within(generated);
    let clamped = squared < T::zero();
    Ok(CmmdResult {
        distance: squared.max(T::zero()).sqrt(),
        squared,
        clamped,
        sigma,
    })
}

pub fn cmmd_with<T: Scalar>(
    originals: &[&[T]],
    generated: &[&[T]],
    bandwidth: Bandwidth,
) -> Result<CmmdResult<T>, MetricsError> {
    let sigma = match bandwidth {
        Bandwidth::Median => median_bandwidth(originals, generated),
        Bandwidth::Fixed(s) => T::lit(s),
    };
    cmmd(originals, generated, sigma)
}

// ---------------------------------------------------------------------------
// Timeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub iteration: u32,
    pub informativeness: f64,
    pub diversity: f64,
    pub distance: f64,
    /// The squared distance estimate was negative and clamped to 0.
    #[serde(default)]
    pub distance_clamped: bool,
    pub generated_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsConfig {
    #[serde(default)]
    pub bandwidth: Bandwidth,
}

/// Metrics of the cumulative generated images with `iteration <= iteration`.
pub fn metric_snapshot<T: Scalar>(
    corpus: &Corpus<T>,
    iteration: u32,
    config: &MetricsConfig,
) -> Result<MetricPoint, MetricsError> {
    let originals: Vec<usize> = (0..corpus.images.len())
        .filter(|&i| corpus.images[i].kind == ImageKind::Original)
        .collect();
    let generated: Vec<usize> = (0..corpus.images.len())
        .filter(|&i| {
            let img = &corpus.images[i];
            img.kind == ImageKind::Generated && img.iteration <= iteration
        })
        .collect();
    if generated.is_empty() {
        return Err(MetricsError::MissingGenerated(iteration));
    }

    let reference = class_reference_predictions(corpus, &originals)?;
    let mut pairs = Vec::with_capacity(generated.len());
    for &g in &generated {
        let img = &corpus.images[g];
        let p_gen = img
            .prediction
            .as_deref()
            .ok_or_else(|| MetricsError::MissingPredictions(img.id.clone()))?;
        let p_orig = reference
            .get(img.class_name.as_str())
            .ok_or_else(|| MetricsError::MissingPredictions(img.id.clone()))?;
        pairs.push((p_orig.as_slice(), p_gen));
    }
    let informativeness = mean_informativeness(&pairs)?;

    let gen_emb: Vec<&[T]> = generated.iter().map(|&i| corpus.images[i].embedding.as_slice()).collect();
    let gen_cls: Vec<&str> = generated.iter().map(|&i| corpus.images[i].class_name.as_str()).collect();
    let diversity = diversity(&gen_emb, &gen_cls)?;

    let orig_emb: Vec<&[T]> = originals.iter().map(|&i| corpus.images[i].embedding.as_slice()).collect();
    let dist = cmmd_with(&orig_emb, &gen_emb, config.bandwidth)?;

    Ok(MetricPoint {
        iteration,
        informativeness: informativeness.as_f64(),
        diversity: diversity.as_f64(),
        distance: dist.distance.as_f64(),
        distance_clamped: dist.clamped,
        generated_count: generated.len(),
    })
}

/// The iteration-0 point: the originals scored against themselves (distance 0).
pub fn baseline_snapshot<T: Scalar>(corpus: &Corpus<T>) -> Result<MetricPoint, MetricsError> {
    let originals: Vec<usize> = (0..corpus.images.len())
        .filter(|&i| corpus.images[i].kind == ImageKind::Original)
        .collect();
    if originals.is_empty() {
        return Err(MetricsError::EmptyClass);
    }
    let mut pairs = Vec::with_capacity(originals.len());
    for &o in &originals {
        let img = &corpus.images[o];
        let p = img
            .prediction
            .as_deref()
            .ok_or_else(|| MetricsError::MissingPredictions(img.id.clone()))?;
        pairs.push((p, p));
    }
    let emb: Vec<&[T]> = originals.iter().map(|&i| corpus.images[i].embedding.as_slice()).collect();
    let cls: Vec<&str> = originals.iter().map(|&i| corpus.images[i].class_name.as_str()).collect();
    Ok(MetricPoint {
        iteration: 0,
        informativeness: mean_informativeness(&pairs)?.as_f64(),
        diversity: diversity(&emb, &cls)?.as_f64(),
        distance: 0.0,
        distance_clamped: false,
        generated_count: 0,
    })
}

/// Mean original prediction per class; a generated image inherits its class's reference.
fn class_reference_predictions<'a, T: Scalar>(
    corpus: &'a Corpus<T>,
    originals: &[usize],
) -> Result<BTreeMap<&'a str, Vec<T>>, MetricsError> {
    let mut sums: BTreeMap<&str, (Vec<T>, usize)> = BTreeMap::new();
    for &o in originals {
        let img = &corpus.images[o];
        let Some(p) = img.prediction.as_deref() else {
            return Err(MetricsError::MissingPredictions(img.id.clone()));
        };
        let entry = sums
            .entry(img.class_name.as_str())
            .or_insert_with(|| (vec![T::zero(); p.len()], 0));
        entry.0.iter_mut().zip(p).for_each(|(a, &x)| *a += x);
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(c, (s, k))| {
            let k = T::from_count(k);
            (c, s.into_iter().map(|x| x / k).collect())
        })
        .collect())
}

/// Metric points with strictly increasing iterations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTimeline {
    pub points: Vec<MetricPoint>,
}

impl MetricTimeline {
    pub fn push(&mut self, point: MetricPoint) -> Result<(), MetricsError> {
        if let Some(last) = self.points.last() {
            if point.iteration <= last.iteration {
                return Err(MetricsError::NonIncreasingIteration {
                    last: last.iteration,
                    got: point.iteration,
                });
            }
        }
        self.points.push(point);
        Ok(())
    }

    /// The iteration-0 point followed by one point per generation round found in the corpus.
    pub fn from_corpus<T: Scalar>(corpus: &Corpus<T>, config: &MetricsConfig) -> Result<Self, MetricsError> {
        let mut timeline = Self::default();
        timeline.push(baseline_snapshot(corpus)?)?;
        let rounds: std::collections::BTreeSet<u32> = corpus
            .images
            .iter()
            .filter(|i| i.kind == ImageKind::Generated && i.iteration > 0)
            .map(|i| i.iteration)
            .collect();
        for r in rounds {
            timeline.push(metric_snapshot(corpus, r, config)?)?;
        }
        Ok(timeline)
    }

    /// Aligned text table, one row per point.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>9}  {:>9}  {:>15}  {:>9}  {:>9}\n",
            "iteration", "generated", "informativeness", "diversity", "distance"
        );
        for p in &self.points {
            s.push_str(&format!(
                "{:>9}  {:>9}  {:>15.4}  {:>9.4}  {:>9.4}{}\n",
                p.iteration,
                p.generated_count,
                p.informativeness,
                p.diversity,
                p.distance,
                if p.distance_clamped { " (clamped)" } else { "" }
            ));
        }
        s
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for p in &self.points {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, MetricsError> {
        let mut timeline = Self::default();
        for line in input.lines() {
            let line = line.map_err(|e| MetricsError::InvalidArgument(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let p: MetricPoint =
                serde_json::from_str(&line).map_err(|e| MetricsError::InvalidArgument(e.to_string()))?;
            timeline.push(p)?;
        }
        Ok(timeline)
    }
}
