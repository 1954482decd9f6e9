//! Prompt templates, feedback objectives, and hill-climbing prompt evolution.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ImageKind};
use crate::metrics::diversity;
use crate::providers::{EmbeddingProvider, GenerationProvider, MutationProvider, ProviderError};
use crate::scalar::{cosine_similarity, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("unbalanced brackets at byte {0}")]
    Unbalanced(usize),
    #[error("nested option group at byte {0}")]
    Nested(usize),
    #[error("option group at byte {0} has an empty option")]
    EmptyOption(usize),
    #[error("template is empty")]
    Empty,
}

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("confidence needs at least two classes")]
    SingleClass,
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("diversity needs at least two proxies, got {0}")]
    TooFewProxies(usize),
    #[error("embedding dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("invalid feedback: {0}")]
    InvalidFeedback(String),
    #[error("unknown image ids: {0:?}")]
    UnknownImageIds(Vec<String>),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// A literal piece of prompt text or a group of alternatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Text(String),
    Options(Vec<String>),
}

/// Splits `text` into literal segments and `[a | b | c]` option groups.
pub fn parse_template(text: &str) -> Result<Vec<Segment>, TemplateError> {
    if text.trim().is_empty() {
        return Err(TemplateError::Empty);
    }
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut group: Option<(usize, String)> = None;
    for (pos, ch) in text.char_indices() {
        match (ch, &mut group) {
            ('[', Some(_)) => return Err(TemplateError::Nested(pos)),
            ('[', None) => {
                if !literal.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut literal)));
                }
                group = Some((pos, String::new()));
            }
            (']', None) => return Err(TemplateError::Unbalanced(pos)),
            (']', Some((start, body))) => {
                let options: Vec<String> = body.split('|').map(|o| o.trim().to_string()).collect();
                if options.iter().any(String::is_empty) {
                    return Err(TemplateError::EmptyOption(*start));
                }
                segments.push(Segment::Options(options));
                group = None;
            }
            (c, Some((_, body))) => body.push(c),
            (c, None) => literal.push(c),
        }
    }
    if let Some((start, _)) = group {
        return Err(TemplateError::Unbalanced(start));
    }
    if !literal.is_empty() {
        segments.push(Segment::Text(literal));
    }
    Ok(segments)
}

/// Canonical text of parsed segments (`[a | b]` spacing).
pub fn render_template(segments: &[Segment]) -> String {
    segments
        .iter()
        .map(|s| match s {
            Segment::Text(t) => t.clone(),
            Segment::Options(o) => format!("[{}]", o.join(" | ")),
        })
        .collect()
}

/// One concrete prompt: a uniformly chosen option from every group.
pub fn sample_prompt<R: Rng + ?Sized>(segments: &[Segment], rng: &mut R) -> String {
    segments
        .iter()
        .map(|s| match s {
            Segment::Text(t) => t.clone(),
            Segment::Options(o) => o[rng.random_range(0..o.len())].clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub class_name: String,
    pub text: String,
    pub version: u32,
    pub parent_version: Option<u32>,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, class_name: impl Into<String>, text: impl Into<String>) -> Result<Self, TemplateError> {
        let text = text.into();
        parse_template(&text)?;
        Ok(Self {
            id: id.into(),
            class_name: class_name.into(),
            text,
            version: 1,
            parent_version: None,
        })
    }

    pub fn segments(&self) -> Vec<Segment> {
        parse_template(&self.text).expect("validated on construction")
    }

    /// Next version in this prompt's lineage with new text.
    pub fn successor(&self, text: impl Into<String>) -> Result<Self, TemplateError> {
        let text = text.into();
        parse_template(&text)?;
        Ok(Self {
            id: self.id.clone(),
            class_name: self.class_name.clone(),
            text,
            version: self.version + 1,
            parent_version: Some(self.version),
        })
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Zero-shot class distribution: `softmax(cos(e, c_j) / tau_c)` over the class embeddings.
pub fn zero_shot<T: Scalar>(embedding: &[T], classes: &[Vec<T>], tau_c: f64) -> Result<Vec<f64>, RefineError> {
    if classes.len() < 2 {
        return Err(RefineError::SingleClass);
    }
    let logits: Vec<f64> = classes
        .iter()
        .map(|c| cosine_similarity(embedding, c).as_f64() / tau_c)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|x| x / total).collect())
}

/// Largest zero-shot class probability.
pub fn confidence<T: Scalar>(embedding: &[T], classes: &[Vec<T>], tau_c: f64) -> Result<f64, RefineError> {
    Ok(zero_shot(embedding, classes, tau_c)?.into_iter().fold(0.0, f64::max))
}

/// Embeddings of the class names. A lone class gets its negation as a rival so that
/// confidence stays defined.
pub fn class_embeddings(embedder: &dyn EmbeddingProvider, classes: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
    let mut out = embedder.embed(classes)?;
    if out.len() != classes.len() {
        return Err(ProviderError::BadResponse {
            message: "class embedding count".into(),
            expected: Some(classes.len()),
            actual: Some(out.len()),
        });
    }
    if out.len() == 1 {
        let rival = out[0].iter().map(|x| -x).collect();
        out.push(rival);
    }
    Ok(out)
}

/// Gives every image without a prediction its zero-shot distribution over the corpus classes.
/// `classes` may carry extra rivals beyond the corpus classes; they are dropped from the result.
/// Returns the number of images filled.
pub fn fill_predictions(corpus: &mut Corpus<f64>, classes: &[Vec<f64>], tau_c: f64) -> Result<usize, RefineError> {
    let real = corpus.classes.len();
    if classes.len() < real {
        return Err(RefineError::InvalidFeedback(format!("{} class embeddings for {real} classes", classes.len())));
    }
    let mut filled = 0;
    for img in corpus.images.iter_mut().filter(|i| i.prediction.is_none()) {
        let p = if real == 1 {
            vec![1.0]
        } else {
            let mut p = zero_shot(&img.embedding, &classes[..real], tau_c)?;
            p.truncate(real);
            p
        };
        img.prediction = Some(p);
        filled += 1;
    }
    Ok(filled)
}

/// Objective value with its individual terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub value: f64,
    /// Negated similarity to deleted images (delete) or proxy diversity (add).
    pub first: f64,
    /// Similarity to remaining (delete) or selected (add) images.
    pub similarity: f64,
    pub confidence: f64,
    pub proxies: usize,
    /// Sizes of the feedback sets that entered the sums.
    pub reference_sizes: (usize, usize),
}

fn sum_similarity<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>]) -> f64 {
    a.iter()
        .map(|x| b.iter().map(|y| cosine_similarity(x, y).as_f64()).sum::<f64>())
        .sum()
}

fn sum_confidence<T: Scalar>(proxies: &[Vec<T>], classes: &[Vec<T>], tau_c: f64) -> Result<f64, RefineError> {
    proxies.iter().map(|p| confidence(p, classes, tau_c)).sum()
}

/// `-sum sim(g, deleted) + sum sim(g, remaining) + sum confidence(g)` over proxies `g`.
pub fn delete_objective<T: Scalar>(
    proxies: &[Vec<T>],
    deleted: &[Vec<T>],
    remaining: &[Vec<T>],
    classes: &[Vec<T>],
    tau_c: f64,
) -> Result<ObjectiveValue, RefineError> {
    for (name, set) in [("proxy", proxies), ("deleted", deleted), ("remaining", remaining)] {
        if set.is_empty() {
            return Err(RefineError::EmptySet(name));
        }
    }
    let away = -sum_similarity(proxies, deleted);
    let toward = sum_similarity(proxies, remaining);
    let conf = sum_confidence(proxies, classes, tau_c)?;
    Ok(ObjectiveValue {
        value: away + toward + conf,
        first: away,
        similarity: toward,
        confidence: conf,
        proxies: proxies.len(),
        reference_sizes: (deleted.len(), remaining.len()),
    })
}

/// `diversity(proxies) + sum sim(g, selected) + sum confidence(g)` over proxies `g`.
pub fn add_objective<T: Scalar>(
    proxies: &[Vec<T>],
    selected: &[Vec<T>],
    classes: &[Vec<T>],
    tau_c: f64,
) -> Result<ObjectiveValue, RefineError> {
    if proxies.len() < 2 {
        return Err(RefineError::TooFewProxies(proxies.len()));
    }
    if selected.is_empty() {
        return Err(RefineError::EmptySet("selected"));
    }
    let refs: Vec<&[T]> = proxies.iter().map(Vec::as_slice).collect();
    let pseudo = vec![0u8; proxies.len()];
    let div = diversity(&refs, &pseudo)
        .map_err(|e| RefineError::InvalidFeedback(e.to_string()))?
        .as_f64();
    let toward = sum_similarity(proxies, selected);
    let conf = sum_confidence(proxies, classes, tau_c)?;
    Ok(ObjectiveValue {
        value: div + toward + conf,
        first: div,
        similarity: toward,
        confidence: conf,
        proxies: proxies.len(),
        reference_sizes: (selected.len(), 0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackKind {
    Delete,
    Add,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackAction {
    pub kind: FeedbackKind,
    #[serde(rename = "class")]
    pub class_name: String,
    pub image_ids: Vec<String>,
}

/// Embedding sets an objective is evaluated against.
#[derive(Debug, Clone, PartialEq)]
pub enum FeedbackTarget<T = f64> {
    Delete { deleted: Vec<Vec<T>>, remaining: Vec<Vec<T>> },
    Add { selected: Vec<Vec<T>> },
}

impl FeedbackAction {
    /// Resolves the action against a corpus. Remaining images are the class's other images of
    /// either kind.
    pub fn target<T: Scalar>(&self, corpus: &Corpus<T>) -> Result<FeedbackTarget<T>, RefineError> {
        if self.image_ids.is_empty() {
            return Err(RefineError::EmptySet("feedback"));
        }
        if corpus.class_position(&self.class_name).is_none() {
            return Err(RefineError::InvalidFeedback(format!("unknown class {}", self.class_name)));
        }
        let mut chosen = Vec::new();
        let mut unknown = Vec::new();
        for id in &self.image_ids {
            match corpus.image_position(id) {
                Some(i) => {
                    if corpus.images[i].class_name != self.class_name {
                        return Err(RefineError::InvalidFeedback(format!(
                            "image {id} belongs to class {}, not {}",
                            corpus.images[i].class_name, self.class_name
                        )));
                    }
                    if !chosen.contains(&i) {
                        chosen.push(i);
                    }
                }
                None => unknown.push(id.clone()),
            }
        }
        if !unknown.is_empty() {
            return Err(RefineError::UnknownImageIds(unknown));
        }
        let picked: Vec<Vec<T>> = chosen.iter().map(|&i| corpus.images[i].embedding.clone()).collect();
        match self.kind {
            FeedbackKind::Add => Ok(FeedbackTarget::Add { selected: picked }),
            FeedbackKind::Delete => {
                let remaining: Vec<Vec<T>> = corpus
                    .images
                    .iter()
                    .enumerate()
                    .filter(|(i, r)| r.class_name == self.class_name && !chosen.contains(i))
                    .map(|(_, r)| r.embedding.clone())
                    .collect();
                if remaining.is_empty() {
                    return Err(RefineError::EmptySet("remaining"));
                }
                Ok(FeedbackTarget::Delete { deleted: picked, remaining })
            }
        }
    }

    /// Number of images of `kind` among the action's ids.
    pub fn count_kind<T: Scalar>(&self, corpus: &Corpus<T>, kind: ImageKind) -> usize {
        self.image_ids
            .iter()
            .filter_map(|id| corpus.image_position(id))
            .filter(|&i| corpus.images[i].kind == kind)
            .count()
    }
}

impl<T: Scalar> FeedbackTarget<T> {
    pub fn score(&self, proxies: &[Vec<T>], classes: &[Vec<T>], tau_c: f64) -> Result<ObjectiveValue, RefineError> {
        match self {
            FeedbackTarget::Delete { deleted, remaining } => delete_objective(proxies, deleted, remaining, classes, tau_c),
            FeedbackTarget::Add { selected } => add_objective(proxies, selected, classes, tau_c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolveConfig {
    /// Proxy generations per candidate.
    pub proxies: usize,
    /// Stop once an accepted candidate's relative gain falls below this.
    pub epsilon: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Temperature of the zero-shot confidence softmax.
    pub tau_c: f64,
    /// Extra mutation attempts when the provider returns an invalid template.
    pub mutation_retries: usize,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            proxies: 8,
            epsilon: 1e-3,
            max_iter: 10,
            seed: 0,
            tau_c: 0.1,
            mutation_retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iteration: usize,
    pub candidate: String,
    pub objective: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Termination {
    SmallGain { gain: f64 },
    MaxIterations,
    ProviderFailure { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionTrace {
    pub initial: String,
    pub initial_objective: f64,
    pub steps: Vec<TraceStep>,
    pub termination: Termination,
}

impl EvolutionTrace {
    /// Objective of the best prompt so far after every step, starting with the initial one.
    pub fn accepted_objectives(&self) -> Vec<f64> {
        std::iter::once(self.initial_objective)
            .chain(self.steps.iter().filter(|s| s.accepted).map(|s| s.objective))
            .collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.accepted_objectives().windows(2).all(|w| w[0] <= w[1])
    }

    pub fn failed(&self) -> bool {
        matches!(self.termination, Termination::ProviderFailure { .. })
    }
}

/// Hill-climbing prompt refinement.
///
/// Each round mutates the current best prompt, scores the candidate on freshly generated
/// proxies, and keeps it only if its objective is strictly higher. All candidates are scored
/// with the same generation seed, so an unchanged prompt never counts as an improvement.
/// A provider failure ends the run early; the trace up to that point is returned.
pub fn evolve<T: Scalar>(
    prompt: &PromptTemplate,
    target: &FeedbackTarget<T>,
    classes: &[Vec<T>],
    generator: &dyn GenerationProvider,
    mutator: &dyn MutationProvider,
    config: &EvolveConfig,
) -> Result<(PromptTemplate, EvolutionTrace), RefineError> {
    let generation_seed = config.seed ^ 0x5bd1_e995;
    let score = |text: &str| -> Result<f64, RefineError> {
        let proxies: Vec<Vec<T>> = generator
            .generate(text, config.proxies, generation_seed)?
            .into_iter()
            .map(|v| v.into_iter().map(T::lit).collect())
            .collect();
        Ok(target.score(&proxies, classes, config.tau_c)?.value)
    };
    let initial_objective = score(&prompt.text)?;
    let mut best_text = prompt.text.clone();
    let mut best = initial_objective;
    let mut steps = Vec::new();
    let mut termination = Termination::MaxIterations;

    'rounds: for iteration in 0..config.max_iter {
        let mut candidate = None;
        let mut last_error = None;
        for attempt in 0..=config.mutation_retries {
            let seed = config
                .seed
                .wrapping_mul(0x9e37_79b9)
                .wrapping_add((iteration * (config.mutation_retries + 1) + attempt) as u64);
            match mutator.mutate(&best_text, seed) {
                Ok(text) => match parse_template(&text) {
                    Ok(_) => {
                        candidate = Some(text);
                        break;
                    }
                    Err(e) => last_error = Some(ProviderError::InvalidTemplate(e.to_string())),
                },
                Err(e) => {
                    termination = Termination::ProviderFailure { message: e.to_string() };
                    break 'rounds;
                }
            }
        }
        let Some(text) = candidate else {
            let message = last_error.map(|e| e.to_string()).unwrap_or_default();
            termination = Termination::ProviderFailure {
                message: format!("no valid template after {} attempts: {message}", config.mutation_retries + 1),
            };
            break;
        };
        let value = match score(&text) {
            Ok(v) => v,
            Err(RefineError::Provider(e)) => {
                termination = Termination::ProviderFailure { message: e.to_string() };
                break;
            }
            Err(e) => return Err(e),
        };
        let accepted = value > best;
        steps.push(TraceStep {
            iteration,
            candidate: text.clone(),
            objective: value,
            accepted,
        });
        if accepted {
            let gain = (value - best) / best.abs().max(f64::MIN_POSITIVE);
            best = value;
            best_text = text;
            if gain < config.epsilon {
                termination = Termination::SmallGain { gain };
                break;
            }
        }
    }
    let result = if best_text == prompt.text {
        prompt.clone()
    } else {
        prompt.successor(best_text)?
    };
    Ok((
        result,
        EvolutionTrace {
            initial: prompt.text.clone(),
            initial_objective,
            steps,
            termination,
        },
    ))
}
