//! Joint 2D projection of images and content labels.

pub mod loss;
pub mod network;
pub mod pairs;
pub mod train;

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, Modality};
use crate::scalar::Scalar;

pub use loss::{
    contrastive_loss, order_loss, task_weights, OrderLoss, Point, Similarity, Weighting,
};
pub use network::{init_network, Activation, Adam, Network, NetworkConfig};
pub use pairs::{sample_negatives, sample_pairs, PairBatch, PairKind, PairSource, PointRef, SamplingReport, Term};
pub use train::{gradients, project, train, GradientConfig, Inputs, LossReport, Objective, TrainConfig, TrainOutput};

#[derive(Debug, thiserror::Error)]
pub enum ProjectionError {
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("contrastive term has no candidates")]
    EmptyCandidates,
    #[error("layout is missing point {0}")]
    IncompleteLayout(String),
    #[error("layout coordinate for {0} is not finite")]
    NonFiniteCoordinate(String),
    #[error("loss became non-finite")]
    NonFiniteLoss,
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("batch has no terms")]
    EmptyBatch,
    #[error("malformed layout line {line}: {message}")]
    MalformedLayout { line: usize, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 2D coordinates for every image and label of a corpus, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout<T = f64> {
    pub image_ids: Vec<String>,
    pub images: Vec<Point<T>>,
    pub label_ids: Vec<String>,
    pub labels: Vec<Point<T>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutLine {
    id: String,
    modality: Modality,
    x: f64,
    y: f64,
}

impl<T: Scalar> Layout<T> {
    pub fn new(corpus: &Corpus<T>, images: Vec<Point<T>>, labels: Vec<Point<T>>) -> Result<Self, ProjectionError> {
        if images.len() != corpus.images.len() {
            return Err(ProjectionError::IncompleteLayout(format!(
                "{} image coordinates for {} images",
                images.len(),
                corpus.images.len()
            )));
        }
        if labels.len() != corpus.labels.len() {
            return Err(ProjectionError::IncompleteLayout(format!(
                "{} label coordinates for {} labels",
                labels.len(),
                corpus.labels.len()
            )));
        }
        let layout = Self {
            image_ids: corpus.images.iter().map(|r| r.id.clone()).collect(),
            images,
            label_ids: corpus.labels.iter().map(|r| r.id.clone()).collect(),
            labels,
        };
        layout.check_finite()?;
        Ok(layout)
    }

    /// Builds a layout from an id-keyed map; every corpus point must be present.
    pub fn from_map(
        corpus: &Corpus<T>,
        points: &HashMap<(Modality, String), Point<T>>,
    ) -> Result<Self, ProjectionError> {
        let lookup = |modality: Modality, id: &str| {
            points
                .get(&(modality, id.to_string()))
                .copied()
                .ok_or_else(|| ProjectionError::IncompleteLayout(id.to_string()))
        };
        let images = corpus
            .images
            .iter()
            .map(|r| lookup(Modality::Image, &r.id))
            .collect::<Result<_, _>>()?;
        let labels = corpus
            .labels
            .iter()
            .map(|r| lookup(Modality::Label, &r.id))
            .collect::<Result<_, _>>()?;
        Self::new(corpus, images, labels)
    }

    fn check_finite(&self) -> Result<(), ProjectionError> {
        let all = self
            .image_ids
            .iter()
            .zip(&self.images)
            .chain(self.label_ids.iter().zip(&self.labels));
        for (id, p) in all {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(ProjectionError::NonFiniteCoordinate(id.clone()));
            }
        }
        Ok(())
    }

    /// Errors unless this layout covers exactly the corpus' points in corpus order.
    pub fn check_matches(&self, corpus: &Corpus<T>) -> Result<(), ProjectionError> {
        let same_images = self.image_ids.len() == corpus.images.len()
            && self.image_ids.iter().zip(&corpus.images).all(|(a, b)| *a == b.id);
        let same_labels = self.label_ids.len() == corpus.labels.len()
            && self.label_ids.iter().zip(&corpus.labels).all(|(a, b)| *a == b.id);
        if same_images && same_labels {
            return Ok(());
        }
        let missing = corpus
            .images
            .iter()
            .map(|r| &r.id)
            .find(|id| !self.image_ids.contains(id))
            .or_else(|| corpus.labels.iter().map(|r| &r.id).find(|id| !self.label_ids.contains(id)));
        Err(ProjectionError::IncompleteLayout(
            missing.cloned().unwrap_or_else(|| "layout points do not match corpus".into()),
        ))
    }

    pub fn get(&self, modality: Modality, id: &str) -> Option<Point<T>> {
        let (ids, pts) = match modality {
            Modality::Image => (&self.image_ids, &self.images),
            Modality::Label => (&self.label_ids, &self.labels),
        };
        ids.iter().position(|x| x == id).map(|i| pts[i])
    }

    pub fn point(&self, modality: Modality, index: usize) -> Point<T> {
        match modality {
            Modality::Image => self.images[index],
            Modality::Label => self.labels[index],
        }
    }

    pub fn points(&self, modality: Modality) -> &[Point<T>] {
        match modality {
            Modality::Image => &self.images,
            Modality::Label => &self.labels,
        }
    }

    /// Centered on the joint centroid and scaled to unit root-mean-square radius.
    pub fn normalized(&self) -> Self {
        let all: Vec<&Point<T>> = self.images.iter().chain(&self.labels).collect();
        if all.is_empty() {
            return self.clone();
        }
        let n = T::from_count(all.len());
        let cx = all.iter().map(|p| p[0]).sum::<T>() / n;
        let cy = all.iter().map(|p| p[1]).sum::<T>() / n;
        let ms = all
            .iter()
            .map(|p| (p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy))
            .sum::<T>()
            / n;
        let scale = if ms > T::zero() { T::one() / ms.sqrt() } else { T::one() };
        let map = |p: &Point<T>| [(p[0] - cx) * scale, (p[1] - cy) * scale];
        Self {
            image_ids: self.image_ids.clone(),
            images: self.images.iter().map(map).collect(),
            label_ids: self.label_ids.clone(),
            labels: self.labels.iter().map(map).collect(),
        }
    }

    /// One `{id, modality, x, y}` object per line, images first.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), ProjectionError> {
        let rows = self
            .image_ids
            .iter()
            .zip(&self.images)
            .map(|(id, p)| (id, Modality::Image, p))
            .chain(self.label_ids.iter().zip(&self.labels).map(|(id, p)| (id, Modality::Label, p)));
        for (id, modality, p) in rows {
            let line = LayoutLine {
                id: id.clone(),
                modality,
                x: p[0].as_f64(),
                y: p[1].as_f64(),
            };
            serde_json::to_writer(&mut out, &line).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, corpus: &Corpus<T>) -> Result<Self, ProjectionError> {
        let mut points = HashMap::new();
        for (no, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: LayoutLine = serde_json::from_str(&line).map_err(|e| ProjectionError::MalformedLayout {
                line: no + 1,
                message: e.to_string(),
            })?;
            points.insert((row.modality, row.id), [T::lit(row.x), T::lit(row.y)]);
        }
        Self::from_map(corpus, &points)
    }

    pub fn cast<U: Scalar>(&self) -> Layout<U> {
        let conv = |p: &Point<T>| [U::lit(p[0].as_f64()), U::lit(p[1].as_f64())];
        Layout {
            image_ids: self.image_ids.clone(),
            images: self.images.iter().map(conv).collect(),
            label_ids: self.label_ids.clone(),
            labels: self.labels.iter().map(conv).collect(),
        }
    }
}
