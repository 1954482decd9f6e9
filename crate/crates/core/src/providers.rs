//! External capabilities (embedding, proxy generation, prompt mutation, node naming) behind
//! traits, each with a deterministic mock and a JSON-over-HTTP client.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::refine::{parse_template, render_template, sample_prompt, Segment};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("provider unreachable: {0}")]
    Unreachable(String),
    #[error("bad provider response: {message}")]
    BadResponse {
        message: String,
        expected: Option<usize>,
        actual: Option<usize>,
    },
    #[error("provider returned an invalid template: {0}")]
    InvalidTemplate(String),
    #[error("invalid provider configuration: {0}")]
    Config(String),
}

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

pub trait GenerationProvider: Send + Sync {
    /// Embeddings of `count` images generated from concrete prompts sampled from `template`.
    fn generate(&self, template: &str, count: usize, seed: u64) -> Result<Vec<Vec<f64>>, ProviderError>;
}

pub trait MutationProvider: Send + Sync {
    /// A rewritten template; callers validate the syntax.
    fn mutate(&self, template: &str, seed: u64) -> Result<String, ProviderError>;
}

pub trait NamingProvider: Send + Sync {
    /// Name for a group of labels given `(label text, frequency)` pairs.
    fn name(&self, members: &[(String, usize)]) -> Result<String, ProviderError>;
}

/// The four capabilities as shareable handles.
#[derive(Clone)]
pub struct Providers {
    pub embedding: Arc<dyn EmbeddingProvider>,
    pub generation: Arc<dyn GenerationProvider>,
    pub mutation: Arc<dyn MutationProvider>,
    pub naming: Arc<dyn NamingProvider>,
}

impl Providers {
    pub fn mock(seed: u64, dimension: usize) -> Self {
        let embedder = MockEmbedder::new(seed, dimension);
        Self {
            embedding: Arc::new(embedder.clone()),
            generation: Arc::new(MockGenerator::new(embedder)),
            mutation: Arc::new(MockMutator::default()),
            naming: Arc::new(MockNamer),
        }
    }

    pub fn from_config(config: &ProviderConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        match config.kind {
            ProviderKind::Mock => Ok(Self::mock(config.seed.unwrap_or_default(), config.dimension)),
            ProviderKind::Http => {
                let client = Arc::new(HttpProvider::new(config)?);
                Ok(Self {
                    embedding: client.clone(),
                    generation: client.clone(),
                    mutation: client.clone(),
                    naming: client,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub timeout_secs: f64,
    pub seed: Option<u64>,
    pub retry: u32,
    pub dimension: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            endpoint: None,
            timeout_secs: 30.0,
            seed: Some(0),
            retry: 2,
            dimension: 32,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.dimension == 0 {
            return Err(ProviderError::Config("dimension must be positive".into()));
        }
        match self.kind {
            ProviderKind::Http if self.endpoint.as_deref().is_none_or(str::is_empty) => {
                Err(ProviderError::Config("http providers need an endpoint".into()))
            }
            ProviderKind::Http if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) => {
                Err(ProviderError::Config("timeout must be positive".into()))
            }
            ProviderKind::Mock if self.seed.is_none() => Err(ProviderError::Config("mock providers need a seed".into())),
            _ => Ok(()),
        }
    }

    /// Overrides from `EXPANDR_PROVIDER_ENDPOINT` and `EXPANDR_PROVIDER_TIMEOUT`.
    pub fn with_env(mut self) -> Self {
        if let Ok(endpoint) = std::env::var("EXPANDR_PROVIDER_ENDPOINT") {
            if !endpoint.is_empty() {
                self.kind = ProviderKind::Http;
                self.endpoint = Some(endpoint);
            }
        }
        if let Some(t) = std::env::var("EXPANDR_PROVIDER_TIMEOUT").ok().and_then(|t| t.parse().ok()) {
            self.timeout_secs = t;
        }
        self
    }
}

// ---------------------------------------------------------------------------
// Mocks

fn hash_seed(seed: u64, text: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    h.finalize().into()
}

fn unit_vector(rng: &mut ChaCha8Rng, dimension: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dimension).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Hashes each input to a point on the unit sphere.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    pub seed: u64,
    pub dimension: usize,
}

impl MockEmbedder {
    pub fn new(seed: u64, dimension: usize) -> Self {
        Self { seed, dimension }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::from_seed(hash_seed(self.seed, text));
        unit_vector(&mut rng, self.dimension)
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(inputs.iter().map(|t| self.vector(t)).collect())
    }
}

/// Word tokens of a prompt, lowercased, punctuation stripped.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '-')
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Samples embeddings around the normalized sum of a concrete prompt's token vectors.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    pub embedder: MockEmbedder,
    pub spread: f64,
    /// Spread used when the concrete prompt contains `spread_token`.
    pub wide_spread: f64,
    pub spread_token: String,
}

impl MockGenerator {
    pub fn new(embedder: MockEmbedder) -> Self {
        Self {
            embedder,
            spread: 0.05,
            wide_spread: 0.5,
            spread_token: "diverse".into(),
        }
    }

    /// Center the generator samples around for one concrete prompt.
    pub fn centroid(&self, prompt: &str) -> Vec<f64> {
        let d = self.embedder.dimension;
        let mut sum = vec![0.0; d];
        for t in tokens(prompt) {
            for (s, x) in sum.iter_mut().zip(self.embedder.vector(&t)) {
                *s += x;
            }
        }
        normalized(sum)
    }
}

impl GenerationProvider for MockGenerator {
    fn generate(&self, template: &str, count: usize, seed: u64) -> Result<Vec<Vec<f64>>, ProviderError> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let segments = parse_template(template).map_err(|e| ProviderError::InvalidTemplate(e.to_string()))?;
        let mut rng = ChaCha8Rng::from_seed(hash_seed(seed, template));
        let d = self.embedder.dimension;
        let scale = 1.0 / (d as f64).sqrt();
        Ok((0..count)
            .map(|_| {
                let prompt = sample_prompt(&segments, &mut rng);
                let spread = if tokens(&prompt).contains(&self.spread_token) {
                    self.wide_spread
                } else {
                    self.spread
                };
                let center = self.centroid(&prompt);
                let v = center
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c + spread * scale * z
                    })
                    .collect();
                normalized(v)
            })
            .collect())
    }
}

/// Seeded template edits: replace an option, add an option, drop an option, or reword the
/// scene clause, with words from a fixed lexicon.
#[derive(Debug, Clone)]
pub struct MockMutator {
    pub lexicon: Vec<String>,
    pub scenes: Vec<String>,
}

impl Default for MockMutator {
    fn default() -> Self {
        let words = [
            "photo", "picture", "close-up", "portrait", "outdoors", "indoors", "sunlit", "studio", "grass",
            "sofa", "snow", "beach", "diverse",
        ];
        let scenes = ["in a garden", "on a sofa", "in the snow", "on the beach", "in a studio"];
        Self {
            lexicon: words.iter().map(|s| s.to_string()).collect(),
            scenes: scenes.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Which edit a mock mutation applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationRule {
    Replace,
    Add,
    Drop,
    Reword,
}

impl MockMutator {
    pub fn with_lexicon(lexicon: Vec<String>) -> Self {
        Self {
            lexicon,
            ..Self::default()
        }
    }

    /// The edited template and the rule used.
    pub fn apply(&self, template: &str, seed: u64) -> Result<(String, MutationRule), ProviderError> {
        let mut segments = parse_template(template).map_err(|e| ProviderError::InvalidTemplate(e.to_string()))?;
        let mut rng = ChaCha8Rng::from_seed(hash_seed(seed, template));
        let rule = match rng.random_range(0..4) {
            0 => MutationRule::Replace,
            1 => MutationRule::Add,
            2 => MutationRule::Drop,
            _ => MutationRule::Reword,
        };
        let groups: Vec<usize> = segments
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Segment::Options(_)))
            .map(|(i, _)| i)
            .collect();
        let word = |rng: &mut ChaCha8Rng| self.lexicon[rng.random_range(0..self.lexicon.len())].clone();
        let applied = match rule {
            MutationRule::Replace | MutationRule::Add | MutationRule::Drop if groups.is_empty() || self.lexicon.is_empty() => {
                // No group to edit: start one.
                let w = if self.lexicon.is_empty() { "photo".to_string() } else { word(&mut rng) };
                segments.push(Segment::Text(" ".into()));
                segments.push(Segment::Options(vec![w]));
                MutationRule::Add
            }
            MutationRule::Replace => {
                let g = groups[rng.random_range(0..groups.len())];
                let w = word(&mut rng);
                if let Segment::Options(o) = &mut segments[g] {
                    let i = rng.random_range(0..o.len());
                    if !o.contains(&w) {
                        o[i] = w;
                    }
                }
                rule
            }
            MutationRule::Add => {
                let g = groups[rng.random_range(0..groups.len())];
                let w = word(&mut rng);
                if let Segment::Options(o) = &mut segments[g] {
                    if !o.contains(&w) {
                        o.push(w);
                    }
                }
                rule
            }
            MutationRule::Drop => {
                let g = groups[rng.random_range(0..groups.len())];
                if let Segment::Options(o) = &mut segments[g] {
                    if o.len() > 1 {
                        let i = rng.random_range(0..o.len());
                        o.remove(i);
                    }
                }
                rule
            }
            MutationRule::Reword => {
                let text = render_template(&segments);
                let base = self
                    .scenes
                    .iter()
                    .find_map(|s| text.strip_suffix(&format!(", {s}")))
                    .unwrap_or(&text)
                    .to_string();
                if self.scenes.is_empty() {
                    return Ok((text, rule));
                }
                let scene = &self.scenes[rng.random_range(0..self.scenes.len())];
                return Ok((format!("{base}, {scene}"), rule));
            }
        };
        Ok((render_template(&segments), applied))
    }
}

impl MutationProvider for MockMutator {
    fn mutate(&self, template: &str, seed: u64) -> Result<String, ProviderError> {
        self.apply(template, seed).map(|(t, _)| t)
    }
}

/// Joins the two most frequent member labels with "/".
#[derive(Debug, Clone, Copy, Default)]
pub struct MockNamer;

impl NamingProvider for MockNamer {
    fn name(&self, members: &[(String, usize)]) -> Result<String, ProviderError> {
        let mut sorted: Vec<&(String, usize)> = members.iter().collect();
        sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(sorted.iter().take(2).map(|(t, _)| t.as_str()).collect::<Vec<_>>().join("/"))
    }
}

// ---------------------------------------------------------------------------
// HTTP

/// JSON client for a provider server exposing `POST /v1/{embed,generate,mutate,name}`.
///
/// Every request body is `{"capability", "payload", "request_id"}`. Response bodies:
/// embed and generate return `{"vectors": [[f64]]}`, mutate returns `{"template": str}`,
/// name returns `{"name": str}`.
#[derive(Debug)]
pub struct HttpProvider {
    agent: ureq::Agent,
    endpoint: String,
    retry: u32,
    dimension: usize,
    counter: AtomicU64,
}

#[derive(Deserialize)]
struct VectorsResponse {
    vectors: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct TemplateResponse {
    template: String,
}

#[derive(Deserialize)]
struct NameResponse {
    name: String,
}

impl HttpProvider {
    pub fn new(config: &ProviderConfig) -> Result<Self, ProviderError> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| ProviderError::Config("http providers need an endpoint".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint: endpoint.trim_end_matches('/').to_string(),
            retry: config.retry,
            dimension: config.dimension,
            counter: AtomicU64::new(0),
        })
    }

    fn call<R: DeserializeOwned>(&self, capability: &str, payload: Value) -> Result<R, ProviderError> {
        let url = format!("{}/v1/{capability}", self.endpoint);
        let mut last = ProviderError::Unreachable(url.clone());
        for _ in 0..=self.retry {
            let request_id = format!("{capability}-{}", self.counter.fetch_add(1, Ordering::Relaxed));
            let body = json!({"capability": capability, "payload": payload, "request_id": request_id});
            match self.agent.post(&url).send_json(&body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status >= 500 {
                        last = ProviderError::Unreachable(format!("{url} answered {status}"));
                        continue;
                    }
                    if status >= 400 {
                        return Err(ProviderError::BadResponse {
                            message: format!("{url} answered {status}"),
                            expected: None,
                            actual: None,
                        });
                    }
                    return resp.body_mut().read_json::<R>().map_err(|e| ProviderError::BadResponse {
                        message: e.to_string(),
                        expected: None,
                        actual: None,
                    });
                }
                Err(e) => last = ProviderError::Unreachable(format!("{url}: {e}")),
            }
        }
        Err(last)
    }

    fn check_vectors(&self, vectors: Vec<Vec<f64>>, count: usize) -> Result<Vec<Vec<f64>>, ProviderError> {
        if vectors.len() != count {
            return Err(ProviderError::BadResponse {
                message: "wrong number of vectors".into(),
                expected: Some(count),
                actual: Some(vectors.len()),
            });
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != self.dimension) {
            return Err(ProviderError::BadResponse {
                message: "wrong embedding dimension".into(),
                expected: Some(self.dimension),
                actual: Some(v.len()),
            });
        }
        if vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(ProviderError::BadResponse {
                message: "non-finite embedding value".into(),
                expected: None,
                actual: None,
            });
        }
        Ok(vectors)
    }
}

impl EmbeddingProvider for HttpProvider {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let r: VectorsResponse = self.call("embed", json!({"inputs": inputs}))?;
        self.check_vectors(r.vectors, inputs.len())
    }
}

impl GenerationProvider for HttpProvider {
    fn generate(&self, template: &str, count: usize, seed: u64) -> Result<Vec<Vec<f64>>, ProviderError> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let r: VectorsResponse = self.call("generate", json!({"template": template, "count": count, "seed": seed}))?;
        self.check_vectors(r.vectors, count)
    }
}

impl MutationProvider for HttpProvider {
    /// Invalid templates are requested again up to the retry count.
    fn mutate(&self, template: &str, seed: u64) -> Result<String, ProviderError> {
        let mut last = String::new();
        for attempt in 0..=self.retry {
            let r: TemplateResponse = self.call(
                "mutate",
                json!({"template": template, "seed": seed.wrapping_add(attempt as u64)}),
            )?;
            match parse_template(&r.template) {
                Ok(_) => return Ok(r.template),
                Err(e) => last = format!("{:?}: {e}", r.template),
            }
        }
        Err(ProviderError::InvalidTemplate(last))
    }
}

impl NamingProvider for HttpProvider {
    fn name(&self, members: &[(String, usize)]) -> Result<String, ProviderError> {
        let list: Vec<Value> = members.iter().map(|(t, n)| json!({"label": t, "count": n})).collect();
        let r: NameResponse = self.call("name", json!({"members": list}))?;
        Ok(r.name)
    }
}
