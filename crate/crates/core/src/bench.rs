//! Synthetic many-to-many benchmark with planted classes and content labels.

use rand::seq::index::sample_weighted;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, EdgeSpec, ImageRecord, LabelRecord};
use crate::evaluate::{evaluate_layout, EvalError, EvalReport, EvalRow};
use crate::projection::{train, NetworkConfig, Objective, ProjectionError, TrainConfig};
use crate::providers::{GenerationProvider, MockEmbedder, MockGenerator, MockMutator};
use crate::refine::{evolve, EvolutionTrace, EvolveConfig, FeedbackTarget, PromptTemplate, RefineError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub images_per_class: usize,
    /// Labels specific to one class.
    pub labels_per_class: usize,
    /// Context labels shared across classes, drawn with Zipf-like frequencies.
    pub shared_labels: usize,
    pub dimension: usize,
    /// Weight of the contained labels' embeddings in an image embedding.
    pub label_mix: f64,
    pub noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            images_per_class: 100,
            labels_per_class: 4,
            shared_labels: 20,
            dimension: 32,
            label_mix: 0.5,
            noise: 0.15,
        }
    }
}

fn unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Builds the benchmark corpus. Every image contains one or two labels of its own class and
/// up to two shared context labels.
pub fn synthetic_corpus<T: Scalar>(config: &GeneratorConfig, seed: u64) -> Result<Corpus<T>, CorpusError> {
    if config.classes == 0 || config.images_per_class == 0 || config.labels_per_class == 0 || config.dimension == 0 {
        return Err(CorpusError::InvalidArgument("benchmark sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.dimension;
    let centers: Vec<Vec<f64>> = (0..config.classes).map(|_| unit(&mut rng, d)).collect();
    let classes: Vec<String> = (0..config.classes).map(|c| format!("class{c:02}")).collect();

    let mut label_vecs = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for j in 0..config.labels_per_class {
            let u = unit(&mut rng, d);
            let mut v: Vec<f64> = center.iter().zip(&u).map(|(a, b)| a + 0.6 * b).collect();
            normalize(&mut v);
            let id = format!("c{c:02}-{j}");
            labels.push(LabelRecord::new(id.clone(), id, v.iter().map(|&x| T::lit(x)).collect()));
            label_vecs.push(v);
        }
    }
    for s in 0..config.shared_labels {
        let v = unit(&mut rng, d);
        let id = format!("shared-{s:02}");
        labels.push(LabelRecord::new(id.clone(), id, v.iter().map(|&x| T::lit(x)).collect()));
        label_vecs.push(v);
    }
    let shared_base = config.classes * config.labels_per_class;
    let zipf: Vec<f64> = (0..config.shared_labels).map(|r| 1.0 / (r + 1) as f64).collect();

    let mut images = Vec::new();
    let mut edges = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for n in 0..config.images_per_class {
            let id = format!("img-{c:02}-{n:04}");
            let own = rng.random_range(1..=2usize.min(config.labels_per_class));
            let mut contained: Vec<usize> = rand::seq::index::sample(&mut rng, config.labels_per_class, own)
                .into_iter()
                .map(|j| c * config.labels_per_class + j)
                .collect();
            let extra = rng.random_range(0..=2usize.min(config.shared_labels));
            if extra > 0 {
                let picks = sample_weighted(&mut rng, config.shared_labels, |i| zipf[i], extra)
                    .expect("positive weights");
                contained.extend(picks.into_iter().map(|s| shared_base + s));
            }
            let mut v = center.clone();
            for &l in &contained {
                for (x, y) in v.iter_mut().zip(&label_vecs[l]) {
                    *x += config.label_mix * y;
                }
            }
            for x in v.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += config.noise * z;
            }
            normalize(&mut v);
            images.push(ImageRecord::original(
                id.clone(),
                classes[c].clone(),
                v.iter().map(|&x| T::lit(x)).collect(),
            ));
            for &l in &contained {
                edges.push(EdgeSpec::new(id.clone(), labels[l].id.clone()));
            }
        }
    }
    Corpus::new(classes, d, images, labels, edges)
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("corpus generation: {0}")]
    Corpus(#[from] CorpusError),
    #[error("training: {0}")]
    Train(#[from] ProjectionError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    /// Epochs for the order-loss baseline; defaults to the contrastive epoch count.
    pub baseline_epochs: Option<usize>,
    pub k: usize,
    /// Largest tolerated intra-modal drop of M2M relative to the image-only run.
    pub intra_tolerance: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            train: TrainConfig {
                epochs: 80,
                network: NetworkConfig {
                    hidden: vec![128, 128, 64, 32, 16],
                    ..NetworkConfig::default()
                },
                ..TrainConfig::default()
            },
            baseline_epochs: None,
            k: crate::evaluate::DEFAULT_K,
            intra_tolerance: 0.02,
        }
    }
}

pub const M2M: &str = "m2m";
pub const ORDER_BASELINE: &str = "order-loss";
pub const IMAGE_ONLY: &str = "image-only";
pub const RANDOM_INIT: &str = "initial";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub report: EvalReport,
    /// M2M strictly beats the order-loss baseline on IMS, inter-modal T and C.
    pub beats_baseline: bool,
    /// M2M intra-modal T and C are within tolerance of the image-only run.
    pub intra_within_tolerance: bool,
}

fn row<'a>(report: &'a EvalReport, method: &str) -> &'a EvalRow {
    report.row(method).expect("method evaluated")
}

/// Trains all methods on the benchmark corpus for one seed and evaluates them.
pub fn run_seed<T: Scalar>(config: &BenchConfig, seed: u64) -> Result<SeedResult, BenchError> {
    let corpus = synthetic_corpus::<T>(&config.generator, seed)?;
    let base = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let mut rows = Vec::new();
    let runs = [
        (RANDOM_INIT, Objective::M2M, Some(0)),
        (M2M, Objective::M2M, None),
        (ORDER_BASELINE, Objective::OrderLoss, config.baseline_epochs),
        (IMAGE_ONLY, Objective::ImageOnly, None),
    ];
    for (name, objective, epochs) in runs {
        let cfg = TrainConfig {
            objective,
            epochs: epochs.unwrap_or(base.epochs),
            ..base.clone()
        };
        let out = train(&corpus, &cfg)?;
        rows.push(evaluate_layout(name, &corpus, &out.layout, config.k)?);
    }
    let report = EvalReport {
        dataset: format!("synthetic-{seed}"),
        k: config.k,
        rows,
    };
    let m2m = row(&report, M2M);
    let img = row(&report, IMAGE_ONLY);
    let beats_baseline = m2m.dominates_inter(row(&report, ORDER_BASELINE));
    let intra_within_tolerance = (m2m.t_intra - img.t_intra).abs() <= config.intra_tolerance
        && (m2m.c_intra - img.c_intra).abs() <= config.intra_tolerance;
    Ok(SeedResult {
        seed,
        report,
        beats_baseline,
        intra_within_tolerance,
    })
}

/// Planted delete-feedback scenario for prompt refinement: the deleted images sit around the
/// mock generator's output for a "snow" prompt and the remaining ones around a "grass" prompt,
/// while the starting template mentions snow.
pub struct SteeringScenario {
    pub generator: MockGenerator,
    pub mutator: MockMutator,
    pub prompt: PromptTemplate,
    pub classes: Vec<Vec<f64>>,
    pub deleted: Vec<Vec<f64>>,
    pub remaining: Vec<Vec<f64>>,
}

impl SteeringScenario {
    pub fn planted(seed: u64, dimension: usize) -> Result<Self, RefineError> {
        let embedder = MockEmbedder::new(seed, dimension);
        let generator = MockGenerator::new(embedder.clone());
        let deleted = generator.generate("a photo of a cat snow snow", 10, seed.wrapping_add(1))?;
        let remaining = generator.generate("a photo of a cat grass grass", 10, seed.wrapping_add(2))?;
        Ok(Self {
            generator,
            mutator: MockMutator::with_lexicon(["grass", "snow", "photo", "sunlit"].map(String::from).to_vec()),
            prompt: PromptTemplate::new("cat-0", "cat", "a [photo | picture] of a cat [in the snow]")?,
            classes: vec![embedder.vector("cat"), embedder.vector("dog")],
            deleted,
            remaining,
        })
    }

    pub fn target(&self) -> FeedbackTarget<f64> {
        FeedbackTarget::Delete {
            deleted: self.deleted.clone(),
            remaining: self.remaining.clone(),
        }
    }

    pub fn run(&self, config: &EvolveConfig) -> Result<(PromptTemplate, EvolutionTrace), RefineError> {
        evolve(&self.prompt, &self.target(), &self.classes, &self.generator, &self.mutator, config)
    }

    /// Fresh proxies for a template, independent of the seed used during evolution.
    pub fn proxies(&self, template: &str, count: usize) -> Result<Vec<Vec<f64>>, RefineError> {
        Ok(self.generator.generate(template, count, 0xfeed)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Modality;

    #[test]
    fn generator_shape_and_determinism() {
        let cfg = GeneratorConfig::default();
        let a = synthetic_corpus::<f64>(&cfg, 3).unwrap();
        assert_eq!(a.population(Modality::Image), 1000);
        assert_eq!(a.population(Modality::Label), 60);
        assert!(!a.graph.is_many_to_one());
        assert_eq!(a, synthetic_corpus::<f64>(&cfg, 3).unwrap());
        assert_ne!(a, synthetic_corpus::<f64>(&cfg, 4).unwrap());
    }
}
