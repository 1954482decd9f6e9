//! Synchronous session computations: building snapshots and running generation rounds.

use std::collections::BTreeMap;
use std::sync::Arc;

use expandr_core::corpus::{CorpusError, EdgeSpec, ImageRecord};
use expandr_core::hierarchy::HierarchyError;
use expandr_core::metrics::{metric_snapshot, MetricPoint, MetricTimeline, MetricsConfig, MetricsError};
use expandr_core::projection::{project, train, Network, NetworkConfig, ProjectionError, TrainConfig};
use expandr_core::providers::{ProviderConfig, ProviderError, Providers};
use expandr_core::refine::{class_embeddings, fill_predictions, EvolutionTrace, EvolveConfig, PromptTemplate, RefineError};
use expandr_core::scalar::cosine_similarity;
use expandr_core::{Corpus, LabelTree, Layout};
use serde::{Deserialize, Serialize};

/// Session settings; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub evolve: EvolveConfig,
    pub providers: ProviderConfig,
    pub metrics: MetricsConfig,
    /// Images generated when a recommended prompt is accepted.
    pub generation_count: usize,
    /// Temperature of the zero-shot predictions assigned to images without one.
    pub tau_c: f64,
    /// Default tree-cut budget.
    pub budget: usize,
    /// Extra labels attached to a generated image when their cosine similarity to it reaches
    /// this value; the nearest label is always attached.
    pub label_threshold: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: TrainConfig {
                epochs: 40,
                network: NetworkConfig {
                    hidden: vec![64, 64, 32, 32, 16],
                    ..NetworkConfig::default()
                },
                ..TrainConfig::default()
            },
            evolve: EvolveConfig::default(),
            providers: ProviderConfig::default(),
            metrics: MetricsConfig::default(),
            generation_count: 16,
            tau_c: 0.1,
            budget: 12,
            label_threshold: 0.8,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("ingest: {0}")]
    Corpus(#[from] CorpusError),
    #[error("projection: {0}")]
    Projection(#[from] ProjectionError),
    #[error("hierarchy: {0}")]
    Hierarchy(#[from] HierarchyError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("provider: {0}")]
    Provider(#[from] ProviderError),
    #[error("refinement: {0}")]
    Refine(#[from] RefineError),
    #[error("config: {0}")]
    Config(String),
}

impl EngineError {
    /// Pipeline stage that failed.
    pub fn stage(&self) -> &'static str {
        match self {
            EngineError::Corpus(_) => "ingest",
            EngineError::Projection(_) => "project",
            EngineError::Hierarchy(_) => "hierarchy",
            EngineError::Metrics(_) => "metrics",
            EngineError::Provider(_) => "provider",
            EngineError::Refine(_) => "refine",
            EngineError::Config(_) => "config",
        }
    }
}

/// A prompt with its lineage and an optional recommendation awaiting review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub current: PromptTemplate,
    /// Earlier versions, oldest first.
    pub history: Vec<PromptTemplate>,
    pub pending: Option<Recommendation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub job_id: String,
    pub template: PromptTemplate,
    pub trace: EvolutionTrace,
}

/// Everything a read endpoint may look at, for one corpus version.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub version: u64,
    pub corpus: Arc<Corpus>,
    pub layout: Arc<Layout>,
    pub tree: Arc<LabelTree>,
    pub timeline: Arc<MetricTimeline>,
    pub prompts: BTreeMap<String, PromptEntry>,
}

/// Immutable per-session resources.
pub struct Engine {
    pub config: SessionConfig,
    pub providers: Providers,
    pub network: Network,
    /// Class-name embeddings used for zero-shot predictions and confidence.
    pub class_embeddings: Vec<Vec<f64>>,
}

fn default_prompt(class_name: &str) -> PromptTemplate {
    PromptTemplate::new(
        format!("{class_name}-prompt"),
        class_name,
        format!("a [photo | picture] of a {class_name}"),
    )
    .expect("default template is valid")
}

impl Engine {
    /// Loads providers, trains the projection and computes the first snapshot.
    pub fn start(
        mut corpus: Corpus,
        mut config: SessionConfig,
        prompts: Vec<PromptTemplate>,
    ) -> Result<(Self, Snapshot), EngineError> {
        config.providers.dimension = corpus.dimension;
        if config.providers.seed.is_none() {
            config.providers.seed = Some(config.seed);
        }
        config.train.seed = config.seed;
        let providers = Providers::from_config(&config.providers)?;
        let class_embeddings = class_embeddings(providers.embedding.as_ref(), &corpus.classes)?;
        fill_predictions(&mut corpus, &class_embeddings, config.tau_c)?;
        let trained = train(&corpus, &config.train)?;
        let mut tree = LabelTree::from_corpus(&corpus)?;
        tree.name_nodes(providers.naming.as_ref());
        let timeline = MetricTimeline::from_corpus(&corpus, &config.metrics)?;

        let mut entries: BTreeMap<String, PromptEntry> = BTreeMap::new();
        for p in prompts {
            if corpus.class_position(&p.class_name).is_none() {
                return Err(EngineError::Config(format!("prompt {} names unknown class {}", p.id, p.class_name)));
            }
            entries.insert(p.id.clone(), PromptEntry { current: p, history: Vec::new(), pending: None });
        }
        for c in &corpus.classes {
            if !entries.values().any(|e| &e.current.class_name == c) {
                let p = default_prompt(c);
                entries.insert(p.id.clone(), PromptEntry { current: p, history: Vec::new(), pending: None });
            }
        }
        let snapshot = Snapshot {
            version: 0,
            layout: Arc::new(trained.layout),
            corpus: Arc::new(corpus),
            tree: Arc::new(tree),
            timeline: Arc::new(timeline),
            prompts: entries,
        };
        Ok((
            Self {
                config,
                providers,
                network: trained.network,
                class_embeddings,
            },
            snapshot,
        ))
    }

    /// Generates a round of images with `prompt` and returns the refreshed snapshot at the next
    /// corpus version.
    pub fn generation_round(&self, snapshot: &Snapshot, prompt: &PromptTemplate) -> Result<Snapshot, EngineError> {
        let corpus = &snapshot.corpus;
        let iteration = corpus.images.iter().map(|i| i.iteration).max().unwrap_or(0) + 1;
        let seed = self.config.seed.wrapping_mul(31).wrapping_add(snapshot.version + 1);
        let vectors = self
            .providers
            .generation
            .generate(&prompt.text, self.config.generation_count, seed)?;
        let mut images = Vec::with_capacity(vectors.len());
        let mut edges = Vec::new();
        for (n, v) in vectors.into_iter().enumerate() {
            if v.len() != corpus.dimension {
                return Err(EngineError::Provider(ProviderError::BadResponse {
                    message: "generated embedding has the wrong dimension".into(),
                    expected: Some(corpus.dimension),
                    actual: Some(v.len()),
                }));
            }
            let id = format!("gen-{iteration:03}-{}-{n:03}", prompt.class_name);
            for l in self.contained_labels(corpus, &v) {
                edges.push(EdgeSpec::new(id.clone(), corpus.labels[l].id.clone()));
            }
            let mut record = ImageRecord::generated(id, prompt.class_name.clone(), iteration, v);
            record.prompt_id = Some(prompt.id.clone());
            record.caption = Some(prompt.text.clone());
            images.push(record);
        }
        let mut next = corpus.with_generation(images, edges)?;
        fill_predictions(&mut next, &self.class_embeddings, self.config.tau_c)?;
        let layout = project(&self.network, &next)?.normalized();
        let mut tree = LabelTree::from_corpus(&next)?;
        tree.name_nodes(self.providers.naming.as_ref());
        let mut timeline = (*snapshot.timeline).clone();
        timeline.push(metric_snapshot(&next, iteration, &self.config.metrics)?)?;
        Ok(Snapshot {
            version: snapshot.version + 1,
            corpus: Arc::new(next),
            layout: Arc::new(layout),
            tree: Arc::new(tree),
            timeline: Arc::new(timeline),
            prompts: snapshot.prompts.clone(),
        })
    }

    /// The nearest label by cosine similarity plus every label at least `label_threshold` similar.
    fn contained_labels(&self, corpus: &Corpus, v: &[f64]) -> Vec<usize> {
        let sims: Vec<f64> = corpus.labels.iter().map(|l| cosine_similarity(v, &l.embedding)).collect();
        let best = (0..sims.len()).max_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(b.cmp(&a)));
        (0..sims.len())
            .filter(|&l| Some(l) == best || sims[l] >= self.config.label_threshold)
            .collect()
    }
}

/// The latest metric point of a snapshot.
pub fn latest_metric(snapshot: &Snapshot) -> Option<&MetricPoint> {
    snapshot.timeline.points.last()
}
