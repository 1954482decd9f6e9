//! Gradient computation and the mini-batch training loop.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{contrastive_term, label_neighborhoods, order_loss_grad, task_weights, Neighborhoods, Point};
use super::network::{init_network, Adam, Gradients, Network, NetworkConfig};
use super::pairs::{PairBatch, PairKind, PairSource, PointRef};
use super::{Layout, ProjectionError, Similarity, Weighting};
use crate::corpus::{frequency_weights, knn_graph, Corpus, Modality};
use crate::scalar::Scalar;

/// Per-epoch (or per-batch) loss summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub cl_ii: f64,
    pub cl_il: f64,
    pub cl_ll: f64,
    pub w_il: f64,
    pub w_ll: f64,
    /// Distance-order loss; nonzero only for the order-loss objective.
    pub order: f64,
    /// `cl_ii + w_il * cl_il + w_ll * cl_ll + order`.
    pub total: f64,
}

impl LossReport {
    pub fn compose(epoch: usize, cl: [f64; 3], weights: (f64, f64), order: f64) -> Self {
        Self {
            epoch,
            cl_ii: cl[0],
            cl_il: cl[1],
            cl_ll: cl[2],
            w_il: weights.0,
            w_ll: weights.1,
            order,
            total: cl[0] + weights.0 * cl[1] + weights.1 * cl[2] + order,
        }
    }
}

/// Embedding matrices the network is applied to.
#[derive(Debug, Clone)]
pub struct Inputs<T> {
    pub images: Array2<T>,
    pub labels: Array2<T>,
}

impl<T: Scalar> Inputs<T> {
    pub fn from_corpus(corpus: &Corpus<T>) -> Self {
        let stack = |rows: Vec<&[T]>| {
            let flat: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
            Array2::from_shape_vec((rows.len(), corpus.dimension), flat).expect("rows share the corpus dimension")
        };
        Self {
            images: stack(corpus.embeddings(Modality::Image)),
            labels: stack(corpus.embeddings(Modality::Label)),
        }
    }

    fn row(&self, p: PointRef) -> ndarray::ArrayView1<'_, T> {
        match p {
            PointRef::Image(i) => self.images.row(i),
            PointRef::Label(l) => self.labels.row(l),
        }
    }

    fn gather(&self, points: &[PointRef]) -> Array2<T> {
        let d = self.images.ncols();
        let mut x = Array2::zeros((points.len(), d));
        for (r, &p) in points.iter().enumerate() {
            x.row_mut(r).assign(&self.row(p));
        }
        x
    }
}

/// Settings for one gradient evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientConfig {
    pub tau: f64,
    pub similarity: Similarity,
    /// `(w_il, w_ll)`
    pub weights: (f64, f64),
}

/// Total weighted contrastive loss of a batch and its gradient with respect to every
/// network parameter.
pub fn gradients<T: Scalar>(
    network: &Network<T>,
    inputs: &Inputs<T>,
    batch: &PairBatch,
    config: &GradientConfig,
) -> Result<(Gradients<T>, LossReport), ProjectionError> {
    if batch.is_empty() {
        return Err(ProjectionError::EmptyBatch);
    }
    let points = batch.points();
    let slot: HashMap<PointRef, usize> = points.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let x = inputs.gather(&points);
    let (y, cache) = network.forward_cached(x.view());
    let at = |p: PointRef| -> Point<T> {
        let r = slot[&p];
        [y[[r, 0]], y[[r, 1]]]
    };
    let tau = T::lit(config.tau);
    let scale = [
        1.0,
        config.weights.0,
        config.weights.1,
    ];
    let mut sums = [0.0f64; 3];
    let mut grad_out = Array2::<T>::zeros(y.raw_dim());
    let mut candidates = Vec::new();
    for term in &batch.terms {
        let k = term.kind.index();
        let norm = batch.normalizers[k];
        if norm <= 0.0 {
            return Err(ProjectionError::BadConfig(format!("{:?} terms without a normalizer", term.kind)));
        }
        candidates.clear();
        candidates.push(at(term.positive));
        candidates.extend(term.negatives.iter().map(|&p| at(p)));
        let g = contrastive_term(at(term.anchor), &candidates, 0, tau, config.similarity)?;
        sums[k] += g.loss.as_f64();
        let c = T::lit(scale[k] / norm);
        let a = slot[&term.anchor];
        grad_out[[a, 0]] += c * g.anchor[0];
        grad_out[[a, 1]] += c * g.anchor[1];
        let refs = std::iter::once(term.positive).chain(term.negatives.iter().copied());
        for (p, gp) in refs.zip(&g.candidates) {
            let r = slot[&p];
            grad_out[[r, 0]] += c * gp[0];
            grad_out[[r, 1]] += c * gp[1];
        }
    }
    let mut cl = [0.0; 3];
    for k in 0..3 {
        if batch.normalizers[k] > 0.0 {
            cl[k] = sums[k] / batch.normalizers[k];
        }
    }
    let report = LossReport::compose(0, cl, config.weights, 0.0);
    if !report.total.is_finite() {
        return Err(ProjectionError::NonFiniteLoss);
    }
    let grads = network.backward(&cache, grad_out.view());
    if !grads.is_finite() {
        return Err(ProjectionError::NonFiniteLoss);
    }
    Ok((grads, report))
}

/// Distance-order loss over a subset of images (and all labels) with its parameter gradient.
pub fn order_gradients<T: Scalar>(
    network: &Network<T>,
    inputs: &Inputs<T>,
    neighborhoods: &Neighborhoods<T>,
    images: &[usize],
) -> Result<(Gradients<T>, T), ProjectionError> {
    let n_labels = inputs.labels.nrows();
    let mut local = vec![usize::MAX; inputs.images.nrows()];
    for (slot, &i) in images.iter().enumerate() {
        local[i] = slot;
    }
    let restricted: Neighborhoods<T> = neighborhoods
        .iter()
        .map(|(l, imgs)| {
            (
                *l,
                imgs.iter()
                    .filter(|(i, _)| local[*i] != usize::MAX)
                    .map(|&(i, h)| (local[i], h))
                    .collect(),
            )
        })
        .collect();
    let mut points: Vec<PointRef> = images.iter().map(|&i| PointRef::Image(i)).collect();
    points.extend((0..n_labels).map(PointRef::Label));
    let x = inputs.gather(&points);
    let (y, cache) = network.forward_cached(x.view());
    let pt = |r: usize| [y[[r, 0]], y[[r, 1]]];
    let img_pts: Vec<Point<T>> = (0..images.len()).map(pt).collect();
    let lab_pts: Vec<Point<T>> = (0..n_labels).map(|l| pt(images.len() + l)).collect();
    let (value, gi, gl) = order_loss_grad(&restricted, &img_pts, &lab_pts);
    if !value.is_finite() {
        return Err(ProjectionError::NonFiniteLoss);
    }
    let mut grad_out = Array2::<T>::zeros(y.raw_dim());
    for (r, g) in gi.iter().chain(&gl).enumerate() {
        grad_out[[r, 0]] = g[0];
        grad_out[[r, 1]] = g[1];
    }
    Ok((network.backward(&cache, grad_out.view()), value))
}

/// What the network is trained to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Weighted sum of the image–image, image–label and label–label contrastive losses.
    #[default]
    M2M,
    /// Image–image contrastive loss only; labels are projected but not trained on.
    ImageOnly,
    /// Distance-order loss from labels to their images.
    OrderLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Label anchors per step; defaults to `batch_size`.
    pub label_batch: Option<usize>,
    pub tau: f64,
    pub k: usize,
    pub m: usize,
    pub lr: f64,
    pub seed: u64,
    pub weighting: Weighting,
    pub similarity: Similarity,
    pub network: NetworkConfig,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            label_batch: None,
            tau: 0.1,
            k: 15,
            m: 5,
            lr: 1e-3,
            seed: 0,
            weighting: Weighting::default(),
            similarity: Similarity::Cauchy,
            network: NetworkConfig::default(),
            objective: Objective::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ProjectionError> {
        if self.batch_size == 0 {
            return Err(ProjectionError::BadConfig("batch_size must be positive".into()));
        }
        if self.k == 0 {
            return Err(ProjectionError::BadConfig("k must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ProjectionError::BadConfig("tau must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ProjectionError::BadConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T> {
    /// Normalized to zero centroid and unit RMS radius.
    pub layout: Layout<T>,
    pub history: Vec<LossReport>,
    pub network: Network<T>,
}

/// Projects every corpus point through `network`, returning the raw (unnormalized) layout.
pub fn project<T: Scalar>(network: &Network<T>, corpus: &Corpus<T>) -> Result<Layout<T>, ProjectionError> {
    let inputs = Inputs::from_corpus(corpus);
    let to_points = |x: ArrayView2<T>| -> Vec<Point<T>> {
        let y = network.forward(x);
        y.rows().into_iter().map(|r| [r[0], r[1]]).collect()
    };
    Layout::new(corpus, to_points(inputs.images.view()), to_points(inputs.labels.view()))
}

pub fn train<T: Scalar>(corpus: &Corpus<T>, config: &TrainConfig) -> Result<TrainOutput<T>, ProjectionError> {
    config.validate()?;
    let mut network = init_network::<T>(corpus.dimension, &config.network, config.seed)?;
    let inputs = Inputs::from_corpus(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(&network, config.lr);
    let mut history = Vec::with_capacity(config.epochs);

    let n_images = corpus.images.len();
    let n_labels = corpus.labels.len();
    let steps = n_images.div_ceil(config.batch_size);
    let label_batch = config.label_batch.unwrap_or(config.batch_size).min(n_labels);

    let kinds: &[PairKind] = match config.objective {
        Objective::M2M => &PairKind::ALL,
        Objective::ImageOnly => &[PairKind::II],
        Objective::OrderLoss => &[],
    };
    let image_knn = knn_graph(corpus, config.k, Modality::Image)?;
    let needs_labels = config.objective == Objective::M2M;
    let label_knn = if needs_labels {
        knn_graph(corpus, config.k, Modality::Label)?
    } else {
        crate::corpus::NeighborLists {
            modality: Modality::Label,
            k: config.k,
            lists: vec![Vec::new(); n_labels],
        }
    };
    let frequencies = if needs_labels {
        frequency_weights(corpus)?
    } else {
        vec![0.0; n_labels]
    };
    let source = PairSource::new(corpus, &image_knn, &label_knn, &frequencies, config.m)?;
    let neighborhoods = label_neighborhoods(corpus);

    let mut il_history = Vec::new();
    let mut ll_history = Vec::new();
    for epoch in 0..config.epochs {
        let weights = match config.objective {
            Objective::M2M => task_weights(&il_history, &ll_history, &config.weighting),
            _ => (0.0, 0.0),
        };
        let grad_config = GradientConfig {
            tau: config.tau,
            similarity: config.similarity,
            weights,
        };
        let mut order = vec![0usize; n_images];
        for (i, o) in order.iter_mut().enumerate() {
            *o = i;
        }
        order.shuffle(&mut rng);
        let mut cl_sum = [0.0; 3];
        let mut order_sum = 0.0;
        for chunk in order.chunks(config.batch_size).take(steps) {
            let grads = if config.objective == Objective::OrderLoss {
                let (g, v) = order_gradients(&network, &inputs, &neighborhoods, chunk)?;
                order_sum += v.as_f64();
                g
            } else {
                let mut labels: Vec<usize> = (0..n_labels).collect();
                labels.shuffle(&mut rng);
                labels.truncate(label_batch);
                let batch = source.batch(chunk, &labels, kinds, &mut rng);
                if batch.is_empty() {
                    continue;
                }
                let (g, r) = match gradients(&network, &inputs, &batch, &grad_config) {
                    Ok(x) => x,
                    Err(ProjectionError::NonFiniteLoss) => return Err(ProjectionError::Diverged { epoch }),
                    Err(e) => return Err(e),
                };
                cl_sum[0] += r.cl_ii;
                cl_sum[1] += r.cl_il;
                cl_sum[2] += r.cl_ll;
                g
            };
            adam.step(&mut network, &grads);
        }
        let denom = steps.max(1) as f64;
        let cl = cl_sum.map(|s| s / denom);
        let report = LossReport::compose(epoch, cl, weights, order_sum / denom);
        if !report.total.is_finite() || !network.is_finite() {
            return Err(ProjectionError::Diverged { epoch });
        }
        il_history.push(cl[1]);
        ll_history.push(cl[2]);
        history.push(report);
    }
    let layout = project(&network, corpus)?.normalized();
    Ok(TrainOutput {
        layout,
        history,
        network,
    })
}
