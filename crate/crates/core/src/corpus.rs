//! Images, content labels, their embeddings and the image–label containment graph.
//!
//! A corpus file is line-delimited JSON. Every line is one record discriminated by
//! `"type"`:
//!
//! ```text
//! {"type":"meta","dimension":3,"classes":["cat","dog"]}
//! {"type":"image","id":"i1","class":"cat","kind":"original","iteration":0,"embedding":[...]}
//! {"type":"label","id":"grass","text":"grass","embedding":[...]}
//! {"type":"edge","image":"i1","label":"grass","weight":0.42}
//! ```
//!
//! Records are re-ordered by id on load; all tie-breaking downstream relies on that order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{cast_vec, cosine_distance, Scalar};

/// Tolerance on the sum of a prediction vector.
pub const PREDICTION_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record at `{field}`: {message}")]
    MalformedRecord {
        line: usize,
        field: String,
        message: String,
    },
    #[error("embedding of `{id}` has length {actual}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("edge references unknown id `{0}`")]
    DanglingEdge(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(String, String),
    #[error("image `{id}` references unknown class `{class}`")]
    UnknownClass { id: String, class: String },
    #[error("prediction of `{id}` is invalid: {reason}")]
    InvalidPrediction { id: String, reason: String },
    #[error("corpus has no meta record")]
    MissingMeta,
    #[error("no {0:?} points in corpus")]
    EmptyModality(Modality),
    #[error("containment graph has no edges")]
    EmptyGraph,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Original,
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord<T = f64> {
    pub id: String,
    pub class_name: String,
    pub kind: ImageKind,
    /// Generation round; 0 for originals.
    pub iteration: u32,
    pub prompt_id: Option<String>,
    pub embedding: Vec<T>,
    /// Probability vector over the corpus classes.
    pub prediction: Option<Vec<T>>,
    pub caption: Option<String>,
    pub image_path: Option<String>,
}

impl<T> ImageRecord<T> {
    pub fn original(id: impl Into<String>, class_name: impl Into<String>, embedding: Vec<T>) -> Self {
        Self {
            id: id.into(),
            class_name: class_name.into(),
            kind: ImageKind::Original,
            iteration: 0,
            prompt_id: None,
            embedding,
            prediction: None,
            caption: None,
            image_path: None,
        }
    }

    pub fn generated(
        id: impl Into<String>,
        class_name: impl Into<String>,
        iteration: u32,
        embedding: Vec<T>,
    ) -> Self {
        Self {
            kind: ImageKind::Generated,
            iteration,
            ..Self::original(id, class_name, embedding)
        }
    }

    pub fn with_prediction(mut self, prediction: Vec<T>) -> Self {
        self.prediction = Some(prediction);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord<T = f64> {
    pub id: String,
    pub text: String,
    pub embedding: Vec<T>,
    /// Number of images containing this label (its degree in the graph).
    pub frequency: usize,
}

impl<T> LabelRecord<T> {
    pub fn new(id: impl Into<String>, text: impl Into<String>, embedding: Vec<T>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            embedding,
            frequency: 0,
        }
    }
}

/// Edge between `images[image]` and `labels[label]`; `weight` is their high-dimensional distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge<T = f64> {
    pub image: usize,
    pub label: usize,
    pub weight: T,
}

/// Edge given by ids, as it arrives before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSpec<T = f64> {
    pub image: String,
    pub label: String,
    pub weight: Option<T>,
}

impl<T> EdgeSpec<T> {
    pub fn new(image: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            image: image.into(),
            label: label.into(),
            weight: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph<T = f64> {
    /// Sorted by (image, label).
    pub edges: Vec<Edge<T>>,
    image_labels: Vec<Vec<usize>>,
    label_images: Vec<Vec<usize>>,
}

impl<T: Scalar> BipartiteGraph<T> {
    /// Label indices contained in image `i`, ascending.
    pub fn labels_of(&self, image: usize) -> &[usize] {
        &self.image_labels[image]
    }

    /// Image indices containing label `l`, ascending.
    pub fn images_of(&self, label: usize) -> &[usize] {
        &self.label_images[label]
    }

    pub fn contains(&self, image: usize, label: usize) -> bool {
        self.image_labels[image].binary_search(&label).is_ok()
    }

    pub fn weight(&self, image: usize, label: usize) -> Option<T> {
        self.edges
            .binary_search_by(|e| (e.image, e.label).cmp(&(image, label)))
            .ok()
            .map(|i| self.edges[i].weight)
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// True when every image contains at most one label.
    pub fn is_many_to_one(&self) -> bool {
        self.image_labels.iter().all(|ls| ls.len() <= 1)
    }
}

/// Validated, immutable corpus. Images and labels are sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus<T = f64> {
    pub classes: Vec<String>,
    pub dimension: usize,
    pub images: Vec<ImageRecord<T>>,
    pub labels: Vec<LabelRecord<T>>,
    pub graph: BipartiteGraph<T>,
    image_index: HashMap<String, usize>,
    label_index: HashMap<String, usize>,
}

impl<T: Scalar> Corpus<T> {
    /// Validates and normalizes the parts into a corpus. Missing edge weights are
    /// computed as the cosine distance of the two embeddings.
    pub fn new(
        classes: Vec<String>,
        dimension: usize,
        mut images: Vec<ImageRecord<T>>,
        mut labels: Vec<LabelRecord<T>>,
        edges: Vec<EdgeSpec<T>>,
    ) -> Result<Self, CorpusError> {
        if dimension == 0 {
            return Err(CorpusError::InvalidArgument("dimension must be positive".into()));
        }
        let class_set: BTreeSet<&str> = classes.iter().map(String::as_str).collect();
        if class_set.len() != classes.len() {
            return Err(CorpusError::InvalidArgument("duplicate class name".into()));
        }
        images.sort_by(|a, b| a.id.cmp(&b.id));
        labels.sort_by(|a, b| a.id.cmp(&b.id));

        let mut seen = BTreeSet::new();
        for img in &images {
            if !seen.insert(img.id.as_str()) {
                return Err(CorpusError::DuplicateId(img.id.clone()));
            }
            if img.embedding.len() != dimension {
                return Err(CorpusError::DimensionMismatch {
                    id: img.id.clone(),
                    expected: dimension,
                    actual: img.embedding.len(),
                });
            }
            if !class_set.contains(img.class_name.as_str()) {
                return Err(CorpusError::UnknownClass {
                    id: img.id.clone(),
                    class: img.class_name.clone(),
                });
            }
            if img.kind == ImageKind::Original && img.iteration != 0 {
                return Err(CorpusError::InvalidArgument(format!(
                    "original image `{}` has iteration {}",
                    img.id, img.iteration
                )));
            }
            if let Some(p) = &img.prediction {
                check_prediction(&img.id, p, classes.len())?;
            }
        }
        for lbl in &labels {
            if !seen.insert(lbl.id.as_str()) {
                return Err(CorpusError::DuplicateId(lbl.id.clone()));
            }
            if lbl.embedding.len() != dimension {
                return Err(CorpusError::DimensionMismatch {
                    id: lbl.id.clone(),
                    expected: dimension,
                    actual: lbl.embedding.len(),
                });
            }
        }

        let image_index: HashMap<String, usize> =
            images.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        let label_index: HashMap<String, usize> =
            labels.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();

        let mut resolved = Vec::with_capacity(edges.len());
        let mut pairs = BTreeSet::new();
        for e in edges {
            let &image = image_index
                .get(&e.image)
                .ok_or_else(|| CorpusError::DanglingEdge(e.image.clone()))?;
            let &label = label_index
                .get(&e.label)
                .ok_or_else(|| CorpusError::DanglingEdge(e.label.clone()))?;
            if !pairs.insert((image, label)) {
                return Err(CorpusError::DuplicateEdge(e.image, e.label));
            }
            let weight = match e.weight {
                Some(w) if !(w >= T::zero()) || !w.is_finite() => {
                    return Err(CorpusError::InvalidArgument(format!(
                        "edge ({}, {}) has invalid weight {w}",
                        e.image, e.label
                    )))
                }
                Some(w) => w,
                None => cosine_distance(&images[image].embedding, &labels[label].embedding),
            };
            resolved.push(Edge { image, label, weight });
        }
        resolved.sort_by_key(|e| (e.image, e.label));

        let mut image_labels = vec![Vec::new(); images.len()];
        let mut label_images = vec![Vec::new(); labels.len()];
        for e in &resolved {
            image_labels[e.image].push(e.label);
            label_images[e.label].push(e.image);
        }
        for (lbl, imgs) in labels.iter_mut().zip(&label_images) {
            lbl.frequency = imgs.len();
        }

        Ok(Self {
            classes,
            dimension,
            images,
            labels,
            graph: BipartiteGraph {
                edges: resolved,
                image_labels,
                label_images,
            },
            image_index,
            label_index,
        })
    }

    pub fn image_position(&self, id: &str) -> Option<usize> {
        self.image_index.get(id).copied()
    }

    pub fn label_position(&self, id: &str) -> Option<usize> {
        self.label_index.get(id).copied()
    }

    pub fn class_position(&self, class_name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class_name)
    }

    pub fn population(&self, modality: Modality) -> usize {
        match modality {
            Modality::Image => self.images.len(),
            Modality::Label => self.labels.len(),
        }
    }

    pub fn embedding(&self, modality: Modality, index: usize) -> &[T] {
        match modality {
            Modality::Image => &self.images[index].embedding,
            Modality::Label => &self.labels[index].embedding,
        }
    }

    pub fn embeddings(&self, modality: Modality) -> Vec<&[T]> {
        (0..self.population(modality))
            .map(|i| self.embedding(modality, i))
            .collect()
    }

    pub fn edge_specs(&self) -> Vec<EdgeSpec<T>> {
        self.graph
            .edges
            .iter()
            .map(|e| EdgeSpec {
                image: self.images[e.image].id.clone(),
                label: self.labels[e.label].id.clone(),
                weight: Some(e.weight),
            })
            .collect()
    }

    /// A new corpus version with additional images (and their edges) appended.
    pub fn with_generation(
        &self,
        images: Vec<ImageRecord<T>>,
        edges: Vec<EdgeSpec<T>>,
    ) -> Result<Self, CorpusError> {
        let mut all_images = self.images.clone();
        all_images.extend(images);
        let mut all_edges = self.edge_specs();
        all_edges.extend(edges);
        Self::new(
            self.classes.clone(),
            self.dimension,
            all_images,
            self.labels.clone(),
            all_edges,
        )
    }

    /// Converts every real to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Corpus<U> {
        let images = self
            .images
            .iter()
            .map(|r| ImageRecord {
                id: r.id.clone(),
                class_name: r.class_name.clone(),
                kind: r.kind,
                iteration: r.iteration,
                prompt_id: r.prompt_id.clone(),
                embedding: cast_vec(&r.embedding),
                prediction: r.prediction.as_deref().map(cast_vec),
                caption: r.caption.clone(),
                image_path: r.image_path.clone(),
            })
            .collect();
        let labels = self
            .labels
            .iter()
            .map(|r| LabelRecord {
                id: r.id.clone(),
                text: r.text.clone(),
                embedding: cast_vec(&r.embedding),
                frequency: r.frequency,
            })
            .collect();
        let edges = self
            .graph
            .edges
            .iter()
            .map(|e| Edge {
                image: e.image,
                label: e.label,
                weight: U::lit(e.weight.as_f64()),
            })
            .collect();
        Corpus {
            classes: self.classes.clone(),
            dimension: self.dimension,
            images,
            labels,
            graph: BipartiteGraph {
                edges,
                image_labels: self.graph.image_labels.clone(),
                label_images: self.graph.label_images.clone(),
            },
            image_index: self.image_index.clone(),
            label_index: self.label_index.clone(),
        }
    }
}

fn check_prediction<T: Scalar>(id: &str, p: &[T], classes: usize) -> Result<(), CorpusError> {
    let invalid = |reason: String| CorpusError::InvalidPrediction {
        id: id.to_string(),
        reason,
    };
    if p.len() != classes {
        return Err(invalid(format!("{} entries for {classes} classes", p.len())));
    }
    if p.iter().any(|&x| !(x >= T::zero()) || !x.is_finite()) {
        return Err(invalid("negative or non-finite entry".into()));
    }
    let sum = p.iter().copied().sum::<T>().as_f64();
    if (sum - 1.0).abs() > PREDICTION_SUM_TOLERANCE {
        return Err(invalid(format!("sums to {sum}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    dimension: usize,
    classes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageLine {
    id: String,
    class: String,
    kind: ImageKind,
    #[serde(default)]
    iteration: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_id: Option<String>,
    embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prediction: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelLine {
    id: String,
    text: String,
    embedding: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeLine {
    image: String,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
}

/// One corpus line, tagged by its `"type"` field on the wire.
#[derive(Debug, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Meta(MetaLine),
    Image(ImageLine),
    Label(LabelLine),
    Edge(EdgeLine),
}

impl Record {
    fn parse(line: &str, line_no: usize) -> Result<Self, CorpusError> {
        let malformed = |field: String, message: String| CorpusError::MalformedRecord {
            line: line_no,
            field,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| malformed("<line>".into(), e.to_string()))?;
        let serde_json::Value::Object(mut map) = value else {
            return Err(malformed("<line>".into(), "expected a JSON object".into()));
        };
        let kind = match map.remove("type") {
            Some(serde_json::Value::String(s)) => s,
            Some(_) => return Err(malformed("type".into(), "expected a string".into())),
            None => return Err(malformed("type".into(), "missing field `type`".into())),
        };
        fn typed<D: serde::de::DeserializeOwned>(
            map: serde_json::Map<String, serde_json::Value>,
        ) -> Result<D, (String, String)> {
            serde_path_to_error::deserialize(serde_json::Value::Object(map))
                .map_err(|e| (e.path().to_string(), e.inner().to_string()))
        }
        let parsed = match kind.as_str() {
            "meta" => typed(map).map(Record::Meta),
            "image" => typed(map).map(Record::Image),
            "label" => typed(map).map(Record::Label),
            "edge" => typed(map).map(Record::Edge),
            other => return Err(malformed("type".into(), format!("unknown record type `{other}`"))),
        };
        parsed.map_err(|(field, message)| malformed(field, message))
    }
}

pub fn load_corpus<T: Scalar>(path: impl AsRef<Path>) -> Result<Corpus<T>, CorpusError> {
    read_corpus(fs::File::open(path)?)
}

pub fn read_corpus<T: Scalar, R: Read>(reader: R) -> Result<Corpus<T>, CorpusError> {
    let mut meta: Option<(usize, Vec<String>)> = None;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut edges = Vec::new();

    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match Record::parse(&line, line_no)? {
            Record::Meta(MetaLine { dimension, classes }) => {
                if meta.is_some() {
                    return Err(CorpusError::MalformedRecord {
                        line: line_no,
                        field: "type".into(),
                        message: "second meta record".into(),
                    });
                }
                meta = Some((dimension, classes));
            }
            Record::Image(ImageLine {
                id,
                class,
                kind,
                iteration,
                prompt_id,
                embedding,
                prediction,
                caption,
                image_path,
            }) => {
                if kind == ImageKind::Original && iteration != 0 {
                    return Err(CorpusError::MalformedRecord {
                        line: line_no,
                        field: "iteration".into(),
                        message: "original images must have iteration 0".into(),
                    });
                }
                images.push(ImageRecord {
                    id,
                    class_name: class,
                    kind,
                    iteration,
                    prompt_id,
                    embedding: cast_vec(&embedding),
                    prediction: prediction.as_deref().map(cast_vec),
                    caption,
                    image_path,
                });
            }
            Record::Label(LabelLine { id, text, embedding }) => {
                labels.push(LabelRecord::new(id, text, cast_vec(&embedding)));
            }
            Record::Edge(EdgeLine { image, label, weight }) => {
                if let Some(w) = weight {
                    if !(w >= 0.0) || !w.is_finite() {
                        return Err(CorpusError::MalformedRecord {
                            line: line_no,
                            field: "weight".into(),
                            message: format!("weight must be a finite non-negative real, got {w}"),
                        });
                    }
                }
                edges.push(EdgeSpec {
                    image,
                    label,
                    weight: weight.map(T::lit),
                });
            }
        }
    }
    let (dimension, classes) = meta.ok_or(CorpusError::MissingMeta)?;
    Corpus::new(classes, dimension, images, labels, edges)
}

pub fn save_corpus<T: Scalar>(corpus: &Corpus<T>, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    write_corpus(corpus, &mut file)?;
    file.flush()?;
    Ok(())
}

/// Writes the canonical form: meta, images, labels, then edges (all sorted, weights explicit).
pub fn write_corpus<T: Scalar, W: Write>(corpus: &Corpus<T>, mut out: W) -> Result<(), CorpusError> {
    let to64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
    let mut emit = |r: &Record| -> Result<(), CorpusError> {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    emit(&Record::Meta(MetaLine {
        dimension: corpus.dimension,
        classes: corpus.classes.clone(),
    }))?;
    for img in &corpus.images {
        emit(&Record::Image(ImageLine {
            id: img.id.clone(),
            class: img.class_name.clone(),
            kind: img.kind,
            iteration: img.iteration,
            prompt_id: img.prompt_id.clone(),
            embedding: to64(&img.embedding),
            prediction: img.prediction.as_deref().map(to64),
            caption: img.caption.clone(),
            image_path: img.image_path.clone(),
        }))?;
    }
    for lbl in &corpus.labels {
        emit(&Record::Label(LabelLine {
            id: lbl.id.clone(),
            text: lbl.text.clone(),
            embedding: to64(&lbl.embedding),
        }))?;
    }
    for e in &corpus.graph.edges {
        emit(&Record::Edge(EdgeLine {
            image: corpus.images[e.image].id.clone(),
            label: corpus.labels[e.label].id.clone(),
            weight: Some(e.weight.as_f64()),
        }))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Neighborhoods and frequencies
// ---------------------------------------------------------------------------

/// Per-point k nearest same-modality neighbors as `(index, distance)`, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborLists<T = f64> {
    pub modality: Modality,
    pub k: usize,
    pub lists: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> NeighborLists<T> {
    pub fn neighbors(&self, point: usize) -> impl Iterator<Item = usize> + '_ {
        self.lists[point].iter().map(|&(j, _)| j)
    }

    pub fn is_neighbor(&self, point: usize, other: usize) -> bool {
        self.lists[point].iter().any(|&(j, _)| j == other)
    }
}

/// Exact kNN under cosine distance; ties are broken by index (which is id order).
pub fn knn_graph<T: Scalar>(
    corpus: &Corpus<T>,
    k: usize,
    modality: Modality,
) -> Result<NeighborLists<T>, CorpusError> {
    if k == 0 {
        return Err(CorpusError::InvalidArgument("k must be positive".into()));
    }
    let points = corpus.embeddings(modality);
    if points.is_empty() {
        return Err(CorpusError::EmptyModality(modality));
    }
    Ok(NeighborLists {
        modality,
        k,
        lists: knn_lists(&points, k, cosine_distance),
    })
}

/// Brute-force kNN over arbitrary points and distance.
pub fn knn_lists<T: Scalar, P: AsRef<[T]>>(
    points: &[P],
    k: usize,
    distance: impl Fn(&[T], &[T]) -> T,
) -> Vec<Vec<(usize, T)>> {
    let n = points.len();
    let take = k.min(n.saturating_sub(1));
    (0..n)
        .map(|i| {
            let mut row: Vec<(usize, T)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, distance(points[i].as_ref(), points[j].as_ref())))
                .collect();
            row.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distance").then(a.0.cmp(&b.0)));
            row.truncate(take);
            row
        })
        .collect()
}

/// Label degree over total degree, keyed by label id.
pub fn label_frequencies<T: Scalar>(corpus: &Corpus<T>) -> Result<BTreeMap<String, f64>, CorpusError> {
    let weights = frequency_weights(corpus)?;
    Ok(corpus
        .labels
        .iter()
        .zip(weights)
        .map(|(l, f)| (l.id.clone(), f))
        .collect())
}

/// Label frequencies indexed by label position.
pub fn frequency_weights<T: Scalar>(corpus: &Corpus<T>) -> Result<Vec<f64>, CorpusError> {
    if corpus.graph.is_empty() {
        return Err(CorpusError::EmptyGraph);
    }
    let total = corpus.graph.edges.len() as f64;
    Ok(corpus
        .labels
        .iter()
        .map(|l| l.frequency as f64 / total)
        .collect())
}
