//! `expandr`: batch entry points mirroring the service.

mod chart;
mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use config::FlatConfig;
use expandr_core::bench::{run_seed, ORDER_BASELINE};
use expandr_core::corpus::{load_corpus, save_corpus, ImageKind};
use expandr_core::evaluate::compare;
use expandr_core::metrics::MetricTimeline;
use expandr_core::projection::{train, TrainConfig};
use expandr_core::providers::Providers;
use expandr_core::refine::{class_embeddings, evolve, fill_predictions, FeedbackAction, PromptTemplate};
use expandr_core::theory::{
    adversarial_corpus, construct_many_to_one_layout, count_distance_orders, count_distance_orders_exact, integer_points,
    order_bound, search_adversarial_instance, SearchConfig,
};
use expandr_core::{Corpus, LabelTree, Layout};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "expandr", version, about = "Human-in-the-loop synthetic image dataset expansion")]
struct Cli {
    /// Flat TOML key file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: FlatConfig,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and print its summary; optionally rewrite it in canonical form.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the joint projection and write the layout as JSONL.
    Project {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss history as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Metric timeline of a corpus with generated rounds.
    Metrics {
        #[arg(long)]
        corpus: PathBuf,
        /// Timeline as JSONL.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Line chart of the three metrics.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Score one or more layouts of a corpus.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        /// `name=path` or `path` (named after the file stem); repeatable.
        #[arg(long = "layout", required = true)]
        layouts: Vec<String>,
        /// Report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Distance-order certificates.
    Theory(TheoryArgs),
    /// Degree-of-interest tree cut of the label hierarchy.
    Treecut {
        #[arg(long)]
        corpus: PathBuf,
        /// Focus node id; the root when neither focus option is given.
        #[arg(long, conflicts_with = "focus_label")]
        focus: Option<usize>,
        /// Focus given by label id.
        #[arg(long)]
        focus_label: Option<String>,
        /// Full hierarchy as nested JSON.
        #[arg(long)]
        tree: Option<PathBuf>,
    },
    /// Evolve a prompt from delete or add feedback.
    Refine {
        #[arg(long)]
        corpus: PathBuf,
        /// `{kind, class, image_ids}` JSON.
        #[arg(long)]
        feedback: PathBuf,
        /// Prompt template as JSON, or a plain-text template.
        #[arg(long)]
        prompt: PathBuf,
        /// New prompt version as JSON; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory of session event logs; sessions found there are restored.
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
    /// Synthetic many-to-many benchmark against the order-loss baseline.
    Bench {
        /// Consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Seeds on which the contrastive projection must beat the baseline; all by default.
        #[arg(long)]
        min_wins: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
#[group(skip)]
#[command(group = clap::ArgGroup::new("mode").required(true).multiple(false))]
struct TheoryArgs {
    /// Print the maximum number of distance orders of n plane points.
    #[arg(long, value_name = "N", group = "mode")]
    bound: Option<u64>,
    /// JSON array of [x, y] points; integer inputs are counted exactly.
    #[arg(long, group = "mode")]
    points: Option<PathBuf>,
    /// Check the n-image instance whose labels demand every permutation.
    #[arg(long, value_name = "N", group = "mode")]
    adversarial: Option<usize>,
    /// Check a corpus: bound comparison, then a constructive layout or layout searches.
    #[arg(long, group = "mode")]
    corpus: Option<PathBuf>,
    /// Layout searches for many-to-many instances.
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Constructive layout of a many-to-one corpus, written as JSONL.
    #[arg(long, requires = "corpus")]
    layout_out: Option<PathBuf>,
}

/// An error tagged with the pipeline stage that produced it.
struct Failure {
    stage: &'static str,
    message: String,
}

fn at<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> Failure {
    move |e| Failure {
        stage,
        message: e.to_string(),
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.stage, f.message);
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let cfg = match &cli.config {
        Some(path) => FlatConfig::load(path).map_err(at("config"))?,
        None => FlatConfig::default(),
    }
    .overridden_by(&cli.flags);
    match cli.command {
        Command::Ingest { corpus, out } => ingest(&corpus, out.as_deref()),
        Command::Project { corpus, out, history } => project(&cfg, &corpus, &out, history.as_deref()),
        Command::Metrics { corpus, out, svg } => metrics(&cfg, &corpus, out.as_deref(), svg.as_deref()),
        Command::Evaluate { corpus, layouts, json } => evaluate(&cfg, &corpus, &layouts, json.as_deref()),
        Command::Theory(args) => theory(&cfg, &args),
        Command::Treecut {
            corpus,
            focus,
            focus_label,
            tree,
        } => treecut(&cfg, &corpus, focus, focus_label.as_deref(), tree.as_deref()),
        Command::Refine {
            corpus,
            feedback,
            prompt,
            out,
            trace,
        } => refine(&cfg, &corpus, &feedback, &prompt, out.as_deref(), trace.as_deref()),
        Command::Serve { addr, log_dir } => serve(&cfg, addr, log_dir),
        Command::Bench { seeds, min_wins, out } => bench(&cfg, seeds, min_wins, out.as_deref()),
    }
}

fn read_corpus_file(path: &Path) -> Result<Corpus, Failure> {
    load_corpus(path).map_err(|e| Failure {
        stage: "ingest",
        message: format!("{}: {e}", path.display()),
    })
}

fn create(path: &Path, stage: &'static str) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure {
        stage,
        message: format!("{}: {e}", path.display()),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T, stage: &'static str) -> Outcome {
    let mut out = create(path, stage)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(at(stage))?;
    writeln!(out).and_then(|_| out.flush()).map_err(at(stage))
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn print_json<T: Serialize>(value: &T) {
    emit(&format!("{}\n", serde_json::to_string_pretty(value).expect("serializable")));
}

fn ingest(path: &Path, out: Option<&Path>) -> Outcome {
    let corpus = read_corpus_file(path)?;
    let generated = corpus.images.iter().filter(|i| i.kind == ImageKind::Generated).count();
    let isolated = (0..corpus.images.len()).filter(|&i| corpus.graph.labels_of(i).is_empty()).count();
    let iterations: std::collections::BTreeSet<u32> = corpus.images.iter().map(|i| i.iteration).collect();
    print_json(&json!({
        "classes": corpus.classes,
        "dimension": corpus.dimension,
        "images": corpus.images.len(),
        "original": corpus.images.len() - generated,
        "generated": generated,
        "labels": corpus.labels.len(),
        "edges": corpus.graph.edges.len(),
        "isolated_images": isolated,
        "many_to_one": corpus.graph.is_many_to_one(),
        "iterations": iterations,
    }));
    if let Some(out) = out {
        save_corpus(&corpus, out).map_err(at("ingest"))?;
    }
    Ok(())
}

fn project(cfg: &FlatConfig, path: &Path, out: &Path, history: Option<&Path>) -> Outcome {
    let corpus = read_corpus_file(path)?;
    let train_cfg = cfg.train(TrainConfig::default());
    let trained = train(&corpus, &train_cfg).map_err(at("project"))?;
    let mut w = create(out, "project")?;
    trained.layout.write_jsonl(&mut w).map_err(at("project"))?;
    w.flush().map_err(at("project"))?;
    if let Some(h) = history {
        write_json(h, &trained.history, "project")?;
    }
    let last = trained.history.last();
    print_json(&json!({
        "epochs": train_cfg.epochs,
        "seed": train_cfg.seed,
        "final_loss": last.map(|l| l.total),
        "images": corpus.images.len(),
        "labels": corpus.labels.len(),
    }));
    Ok(())
}

/// Fills missing predictions with zero-shot distributions from the configured embedder.
fn with_predictions(cfg: &FlatConfig, mut corpus: Corpus) -> Result<Corpus, Failure> {
    if corpus.images.iter().any(|i| i.prediction.is_none()) {
        let providers = Providers::from_config(&cfg.providers(corpus.dimension)).map_err(at("provider"))?;
        let classes = class_embeddings(providers.embedding.as_ref(), &corpus.classes).map_err(at("provider"))?;
        fill_predictions(&mut corpus, &classes, cfg.evolve().tau_c).map_err(at("metrics"))?;
    }
    Ok(corpus)
}

fn metrics(cfg: &FlatConfig, path: &Path, out: Option<&Path>, svg: Option<&Path>) -> Outcome {
    let corpus = with_predictions(cfg, read_corpus_file(path)?)?;
    let timeline = MetricTimeline::from_corpus(&corpus, &cfg.metrics()).map_err(at("metrics"))?;
    emit(&timeline.to_table());
    if let Some(out) = out {
        let mut w = create(out, "metrics")?;
        timeline.write_jsonl(&mut w).and_then(|_| w.flush()).map_err(at("metrics"))?;
    }
    if let Some(svg) = svg {
        std::fs::write(svg, chart::line_chart(&timeline)).map_err(at("metrics"))?;
    }
    Ok(())
}

fn evaluate(cfg: &FlatConfig, path: &Path, specs: &[String], json_out: Option<&Path>) -> Outcome {
    let corpus = read_corpus_file(path)?;
    let mut layouts = Vec::new();
    for spec in specs {
        let (name, file) = match spec.split_once('=') {
            Some((n, f)) => (n.to_string(), PathBuf::from(f)),
            None => {
                let f = PathBuf::from(spec);
                let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or(spec).to_string();
                (stem, f)
            }
        };
        let reader = File::open(&file).map(BufReader::new).map_err(|e| Failure {
            stage: "evaluate",
            message: format!("{}: {e}", file.display()),
        })?;
        let layout = Layout::read_jsonl(reader, &corpus).map_err(|e| Failure {
            stage: "evaluate",
            message: format!("{}: {e}", file.display()),
        })?;
        layouts.push((name, layout));
    }
    let dataset = path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
    let k = cfg.k.unwrap_or(expandr_core::evaluate::DEFAULT_K);
    let report = compare(dataset, &layouts, &corpus, k).map_err(at("evaluate"))?;
    emit(&report.to_table());
    if let Some(out) = json_out {
        write_json(out, &report, "evaluate")?;
    }
    Ok(())
}

fn read_points(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path).map_err(at("theory"))?;
    serde_json::from_str(&text).map_err(at("theory"))
}

fn theory(cfg: &FlatConfig, args: &TheoryArgs) -> Outcome {
    let search = SearchConfig {
        steps: args.steps,
        ..SearchConfig::default()
    };
    if let Some(n) = args.bound {
        emit(&format!("{}\n", order_bound(n)));
    } else if let Some(path) = &args.points {
        let value = read_points(path)?;
        let certificate = match serde_json::from_value::<Vec<[i64; 2]>>(value.clone()) {
            Ok(ints) => count_distance_orders_exact(&integer_points(&ints)),
            Err(_) => {
                let floats: Vec<[f64; 2]> = serde_json::from_value(value).map_err(at("theory"))?;
                count_distance_orders(&floats)
            }
        }
        .map_err(at("theory"))?;
        print_json(&certificate);
    } else if let Some(n) = args.adversarial {
        let corpus = adversarial_corpus(n).map_err(at("theory"))?;
        let report = search_adversarial_instance(&corpus, args.trials, cfg.seed(), &search).map_err(at("theory"))?;
        print_json(&report);
    } else if let Some(path) = &args.corpus {
        let corpus = read_corpus_file(path)?;
        if let Some(out) = &args.layout_out {
            let layout = construct_many_to_one_layout(&corpus).map_err(at("theory"))?;
            let mut w = create(out, "theory")?;
            layout.write_jsonl(&mut w).map_err(at("theory"))?;
            w.flush().map_err(at("theory"))?;
        }
        let report = search_adversarial_instance(&corpus, args.trials, cfg.seed(), &search).map_err(at("theory"))?;
        print_json(&report);
    }
    Ok(())
}

fn treecut(cfg: &FlatConfig, path: &Path, focus: Option<usize>, focus_label: Option<&str>, tree_out: Option<&Path>) -> Outcome {
    let corpus = read_corpus_file(path)?;
    let providers = Providers::from_config(&cfg.providers(corpus.dimension)).map_err(at("provider"))?;
    let mut tree = LabelTree::from_corpus(&corpus).map_err(at("hierarchy"))?;
    let unnamed = tree.name_nodes(providers.naming.as_ref());
    let focus = match (focus, focus_label) {
        (Some(f), _) => f,
        (None, Some(l)) => tree.leaf_of(l).ok_or_else(|| Failure {
            stage: "hierarchy",
            message: format!("unknown label {l}"),
        })?,
        (None, None) => tree.root(),
    };
    let budget = cfg.budget.unwrap_or(12);
    let cut = tree.tree_cut(focus, budget).map_err(at("hierarchy"))?;
    let doi = tree.scaled_doi(focus).map_err(at("hierarchy"))?;
    let nodes: Vec<Value> = cut
        .nodes
        .iter()
        .map(|&n| {
            let node = &tree.nodes[n];
            json!({
                "id": n,
                "name": node.name,
                "labels": node.members.iter().map(|&m| &tree.label_ids[m]).collect::<Vec<_>>(),
                "original_count": node.original,
                "generated_count": node.generated,
                "doi": doi[n],
            })
        })
        .collect();
    print_json(&json!({ "focus": focus, "budget": budget, "unnamed": unnamed, "nodes": nodes }));
    if let Some(out) = tree_out {
        write_json(out, &tree.to_json(), "hierarchy")?;
    }
    Ok(())
}

fn read_prompt(path: &Path, class_name: &str) -> Result<PromptTemplate, Failure> {
    let text = std::fs::read_to_string(path).map_err(at("refine"))?;
    if let Ok(p) = serde_json::from_str::<PromptTemplate>(&text) {
        return Ok(p);
    }
    PromptTemplate::new(format!("{class_name}-prompt"), class_name, text.trim()).map_err(at("refine"))
}

fn refine(cfg: &FlatConfig, path: &Path, feedback: &Path, prompt: &Path, out: Option<&Path>, trace_out: Option<&Path>) -> Outcome {
    let corpus = read_corpus_file(path)?;
    let text = std::fs::read_to_string(feedback).map_err(at("refine"))?;
    let action: FeedbackAction = serde_json::from_str(&text).map_err(at("refine"))?;
    let prompt = read_prompt(prompt, &action.class_name)?;
    if prompt.class_name != action.class_name {
        return Err(Failure {
            stage: "refine",
            message: format!("prompt is for class {}, feedback for {}", prompt.class_name, action.class_name),
        });
    }
    let target = action.target(&corpus).map_err(at("refine"))?;
    let providers = Providers::from_config(&cfg.providers(corpus.dimension)).map_err(at("provider"))?;
    let classes = class_embeddings(providers.embedding.as_ref(), &corpus.classes).map_err(at("provider"))?;
    let (next, trace) = evolve(
        &prompt,
        &target,
        &classes,
        providers.generation.as_ref(),
        providers.mutation.as_ref(),
        &cfg.evolve(),
    )
    .map_err(at("refine"))?;
    match out {
        Some(p) => write_json(p, &next, "refine")?,
        None => print_json(&next),
    }
    if let Some(p) = trace_out {
        write_json(p, &trace, "refine")?;
    }
    Ok(())
}

fn serve(cfg: &FlatConfig, addr: SocketAddr, log_dir: Option<PathBuf>) -> Outcome {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();
    let runtime = tokio::runtime::Runtime::new().map_err(at("serve"))?;
    runtime
        .block_on(expandr_service::serve(addr, cfg.session(), log_dir))
        .map_err(at("serve"))
}

fn bench(cfg: &FlatConfig, seeds: u64, min_wins: Option<u64>, out: Option<&Path>) -> Outcome {
    let bench_cfg = cfg.bench();
    let first = cfg.seed();
    let mut results = Vec::new();
    for seed in first..first + seeds {
        let result = run_seed::<f64>(&bench_cfg, seed).map_err(at("bench"))?;
        emit(&format!("seed {seed}\n"));
        emit(&result.report.to_table());
        emit(&format!(
            "beats {ORDER_BASELINE}: {}  intra within {}: {}\n\n",
            result.beats_baseline, bench_cfg.intra_tolerance, result.intra_within_tolerance
        ));
        results.push(result);
    }
    if let Some(p) = out {
        write_json(p, &results, "bench")?;
    }
    let wins = results.iter().filter(|r| r.beats_baseline).count() as u64;
    let needed = min_wins.unwrap_or(seeds);
    emit(&format!("m2m beat {ORDER_BASELINE} on {wins}/{seeds} seeds (needed {needed})\n"));
    if wins < needed {
        return Err(Failure {
            stage: "bench",
            message: format!("contrastive projection beat the baseline on {wins} of {seeds} seeds, needed {needed}"),
        });
    }
    Ok(())
}
