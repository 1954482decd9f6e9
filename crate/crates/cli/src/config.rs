//! Flat key file plus flag overrides. Every key is also a global flag; flags win.

use std::path::Path;

use clap::Args;
use expandr_core::bench::BenchConfig;
use expandr_core::metrics::{Bandwidth, MetricsConfig};
use expandr_core::projection::{Activation, Objective, Similarity, TrainConfig, Weighting};
use expandr_core::providers::{ProviderConfig, ProviderKind};
use expandr_core::refine::EvolveConfig;
use expandr_service::SessionConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct FlatConfig {
    /// Seed for every random choice; outputs are bit-reproducible with mock providers.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Contrastive temperature.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Neighbors per anchor when sampling positives.
    #[arg(long = "positives", global = true)]
    #[serde(rename = "positives")]
    pub knn: Option<usize>,
    /// Negatives per positive.
    #[arg(long, global = true)]
    pub negatives: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, global = true, value_parser = parse_activation)]
    pub activation: Option<Activation>,
    #[arg(long, global = true, value_parser = parse_similarity)]
    pub similarity: Option<Similarity>,
    #[arg(long, global = true, value_parser = parse_objective)]
    pub objective: Option<Objective>,
    /// Exponent of the balanced loss weighting.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,

    /// Neighborhood size of the quality measures.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Fixed kernel bandwidth for the distance metric; the median heuristic when unset.
    #[arg(long, global = true)]
    pub bandwidth: Option<f64>,

    /// Tree-cut node budget.
    #[arg(long, global = true)]
    pub budget: Option<usize>,

    /// Proxy generations per evolution candidate.
    #[arg(long, global = true)]
    pub proxies: Option<usize>,
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    /// Relative gain below which evolution stops.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Temperature of the zero-shot confidence.
    #[arg(long, global = true)]
    pub tau_c: Option<f64>,
    #[arg(long, global = true)]
    pub mutation_retries: Option<usize>,
    /// Images per accepted generation round (service).
    #[arg(long, global = true)]
    pub generation_count: Option<usize>,

    /// `mock` or `http`.
    #[arg(long, global = true, value_parser = parse_provider)]
    pub provider: Option<ProviderKind>,
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    /// Provider request timeout in seconds.
    #[arg(long, global = true)]
    pub timeout: Option<f64>,
    #[arg(long, global = true)]
    pub retry: Option<u32>,
    /// Seed of the mock providers; defaults to `seed`.
    #[arg(long, global = true)]
    pub provider_seed: Option<u64>,

    /// Benchmark corpus size.
    #[arg(long, global = true)]
    pub bench_classes: Option<usize>,
    #[arg(long, global = true)]
    pub images_per_class: Option<usize>,
    #[arg(long, global = true)]
    pub labels_per_class: Option<usize>,
    #[arg(long, global = true)]
    pub shared_labels: Option<usize>,
    #[arg(long, global = true)]
    pub bench_dimension: Option<usize>,
}

fn parse_with<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    parse_with(s)
}
fn parse_similarity(s: &str) -> Result<Similarity, String> {
    parse_with(s)
}
fn parse_objective(s: &str) -> Result<Objective, String> {
    parse_with(s)
}
fn parse_provider(s: &str) -> Result<ProviderKind, String> {
    parse_with(s)
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($field:ident),* $(,)?) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field.clone(); } )*
    };
}

impl FlatConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// `self` with every key set in `flags` replaced.
    pub fn overridden_by(mut self, flags: &FlatConfig) -> Self {
        overlay!(self, flags; seed, epochs, batch_size, tau, knn, negatives, lr, hidden, activation,
            similarity, objective, alpha, k, bandwidth, budget, proxies, max_iter, epsilon, tau_c,
            mutation_retries, generation_count, provider, endpoint, timeout, retry, provider_seed,
            bench_classes, images_per_class, labels_per_class, shared_labels, bench_dimension);
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn train(&self, base: TrainConfig) -> TrainConfig {
        let mut t = base;
        t.seed = self.seed();
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.tau {
            t.tau = v;
        }
        if let Some(v) = self.knn {
            t.k = v;
        }
        if let Some(v) = self.negatives {
            t.m = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = &self.hidden {
            t.network.hidden = v.clone();
        }
        if let Some(v) = self.activation {
            t.network.activation = v;
        }
        if let Some(v) = self.similarity {
            t.similarity = v;
        }
        if let Some(v) = self.objective {
            t.objective = v;
        }
        if let Some(alpha) = self.alpha {
            t.weighting = Weighting::Balanced { alpha };
        }
        t
    }

    pub fn metrics(&self) -> MetricsConfig {
        MetricsConfig {
            bandwidth: self.bandwidth.map_or(Bandwidth::Median, Bandwidth::Fixed),
        }
    }

    pub fn evolve(&self) -> EvolveConfig {
        let mut e = EvolveConfig {
            seed: self.seed(),
            ..EvolveConfig::default()
        };
        if let Some(v) = self.proxies {
            e.proxies = v;
        }
        if let Some(v) = self.max_iter {
            e.max_iter = v;
        }
        if let Some(v) = self.epsilon {
            e.epsilon = v;
        }
        if let Some(v) = self.tau_c {
            e.tau_c = v;
        }
        if let Some(v) = self.mutation_retries {
            e.mutation_retries = v;
        }
        e
    }

    /// Provider settings; environment variables override the endpoint and timeout.
    pub fn providers(&self, dimension: usize) -> ProviderConfig {
        let mut p = ProviderConfig {
            dimension,
            seed: Some(self.provider_seed.unwrap_or(self.seed())),
            ..ProviderConfig::default()
        };
        if let Some(v) = self.provider {
            p.kind = v;
        }
        if let Some(v) = &self.endpoint {
            p.endpoint = Some(v.clone());
        }
        if let Some(v) = self.timeout {
            p.timeout_secs = v;
        }
        if let Some(v) = self.retry {
            p.retry = v;
        }
        p.with_env()
    }

    pub fn session(&self) -> SessionConfig {
        let base = SessionConfig::default();
        let mut s = SessionConfig {
            seed: self.seed(),
            train: self.train(base.train.clone()),
            evolve: self.evolve(),
            providers: self.providers(base.providers.dimension),
            metrics: self.metrics(),
            ..base
        };
        if let Some(v) = self.generation_count {
            s.generation_count = v;
        }
        if let Some(v) = self.tau_c {
            s.tau_c = v;
        }
        if let Some(v) = self.budget {
            s.budget = v;
        }
        s
    }

    pub fn bench(&self) -> BenchConfig {
        let base = BenchConfig::default();
        let mut b = BenchConfig {
            train: self.train(base.train.clone()),
            ..base
        };
        if let Some(v) = self.k {
            b.k = v;
        }
        if let Some(v) = self.bench_classes {
            b.generator.classes = v;
        }
        if let Some(v) = self.images_per_class {
            b.generator.images_per_class = v;
        }
        if let Some(v) = self.labels_per_class {
            b.generator.labels_per_class = v;
        }
        if let Some(v) = self.shared_labels {
            b.generator.shared_labels = v;
        }
        if let Some(v) = self.bench_dimension {
            b.generator.dimension = v;
        }
        b
    }
}
