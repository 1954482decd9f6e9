//! Acceptance checks, one line per criterion. Runs without the libtest harness so the report is
//! always printed; exits nonzero if any criterion fails.

use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use expandr_core::bench::{run_seed, BenchConfig, SteeringScenario};
use expandr_core::corpus::{frequency_weights, knn_graph, write_corpus, Corpus, EdgeSpec, ImageRecord, LabelRecord, Modality};
use expandr_core::hierarchy::{build_hierarchy, LabelTree, TreeCut};
use expandr_core::metrics::{cmmd, diversity, informativeness};
use expandr_core::projection::loss::{order_loss, Similarity};
use expandr_core::projection::*;
use expandr_core::providers::{GenerationProvider, MockEmbedder, MockGenerator};
use expandr_core::refine::{evolve, EvolveConfig, FeedbackTarget};
use expandr_core::theory::*;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

type Check = Result<String, String>;

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria = [
        Criterion { name: "gradient oracle", limit: Duration::from_secs(10), run: gradient_oracle },
        Criterion { name: "distance-order bound", limit: Duration::from_secs(60), run: distance_order_bound },
        Criterion { name: "many-to-one zero loss", limit: Duration::from_secs(10), run: many_to_one_zero_loss },
        Criterion { name: "adversarial instance", limit: Duration::from_secs(120), run: adversarial_instance },
        Criterion { name: "metric closed forms", limit: Duration::from_secs(5), run: metric_closed_forms },
        Criterion { name: "benchmark direction", limit: Duration::from_secs(300), run: benchmark_direction },
        Criterion { name: "refinement", limit: Duration::from_secs(60), run: refinement },
        Criterion { name: "hierarchy tree cut", limit: Duration::from_secs(30), run: hierarchy_tree_cut },
        Criterion { name: "service contract", limit: Duration::from_secs(120), run: service_contract },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.limit => Err(format!("{detail}; over the {}s limit", c.limit.as_secs())),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {} ({:.1}s): {detail}", c.name, elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} ({:.1}s): {detail}", c.name, elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// Projection gradients

fn random_corpus(images: usize, labels: usize, d: usize, seed: u64) -> Corpus<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let label_records = (0..labels).map(|l| LabelRecord::new(format!("l{l}"), format!("l{l}"), v(&mut rng))).collect();
    let mut image_records = Vec::new();
    let mut edges = Vec::new();
    for i in 0..images {
        image_records.push(ImageRecord::original(format!("i{i:02}"), "c", v(&mut rng)));
        let first = rng.random_range(0..labels);
        edges.push(EdgeSpec::new(format!("i{i:02}"), format!("l{first}")));
        if rng.random_bool(0.5) {
            let second = (first + 1 + rng.random_range(0..labels - 1)) % labels;
            edges.push(EdgeSpec::new(format!("i{i:02}"), format!("l{second}")));
        }
    }
    Corpus::new(vec!["c".into()], d, image_records, label_records, edges).unwrap()
}

/// Weighted contrastive loss recomputed from the forward pass with an explicit Cauchy kernel.
fn oracle_loss(net: &Network<f64>, corpus: &Corpus<f64>, batch: &PairBatch, tau: f64, w: (f64, f64)) -> f64 {
    let d = corpus.dimension;
    let rows: Vec<f64> = corpus
        .images
        .iter()
        .map(|r| &r.embedding)
        .chain(corpus.labels.iter().map(|r| &r.embedding))
        .flatten()
        .copied()
        .collect();
    let y = net.forward(Array2::from_shape_vec((rows.len() / d, d), rows).unwrap().view());
    let n_img = corpus.images.len();
    let at = |p: PointRef| match p {
        PointRef::Image(i) => (y[[i, 0]], y[[i, 1]]),
        PointRef::Label(l) => (y[[n_img + l, 0]], y[[n_img + l, 1]]),
    };
    let sim = |a: (f64, f64), b: (f64, f64)| 1.0 / (1.0 + (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2));
    let scale = [1.0, w.0, w.1];
    let mut total = 0.0;
    for t in &batch.terms {
        let a = at(t.anchor);
        let zs: Vec<f64> = std::iter::once(t.positive)
            .chain(t.negatives.iter().copied())
            .map(|c| sim(a, at(c)) / tau)
            .collect();
        let lse = zs.iter().map(|z| z.exp()).sum::<f64>().ln();
        let k = t.kind.index();
        total += scale[k] / batch.normalizers[k] * (lse - zs[0]);
    }
    total
}

fn gradient_oracle() -> Check {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..3 {
        // 14 images and 6 labels: 20 points in 8 dimensions.
        let corpus = random_corpus(14, 6, 8, seed);
        let image_knn = knn_graph(&corpus, 3, Modality::Image).map_err(|e| e.to_string())?;
        let label_knn = knn_graph(&corpus, 2, Modality::Label).map_err(|e| e.to_string())?;
        let freq = frequency_weights(&corpus).map_err(|e| e.to_string())?;
        let source = PairSource::new(&corpus, &image_knn, &label_knn, &freq, 3).map_err(|e| e.to_string())?;
        let batch = sample_pairs(&source, 14, seed).map_err(|e| e.to_string())?;
        let cfg = NetworkConfig {
            hidden: vec![6, 6, 5, 4, 3],
            activation: Activation::Tanh,
        };
        let mut net = init_network::<f64>(8, &cfg, seed).map_err(|e| e.to_string())?;
        let (tau, w) = (0.5, (0.7, 1.3));
        let gc = GradientConfig {
            tau,
            similarity: Similarity::Cauchy,
            weights: w,
        };
        let (grads, _) = gradients(&net, &Inputs::from_corpus(&corpus), &batch, &gc).map_err(|e| e.to_string())?;
        for (i, a) in grads.flatten().iter().enumerate() {
            let orig = *net.parameters().nth(i).unwrap();
            *net.parameters().nth(i).unwrap() = orig + h;
            let up = oracle_loss(&net, &corpus, &batch, tau, w);
            *net.parameters().nth(i).unwrap() = orig - h;
            let down = oracle_loss(&net, &corpus, &batch, tau, w);
            *net.parameters().nth(i).unwrap() = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:.2e} > 1e-4"))?;
    Ok(format!("{checked} parameters over 3 seeds, max relative error {worst:.2e}"))
}

// Theory

/// n(n-1)(n^2-n+2)/8 + 1, independent of the library.
fn bound(n: u128) -> u128 {
    n * (n - 1) * (n * n - n + 2) / 8 + 1
}

fn distance_order_bound() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut maxima = Vec::new();
    for n in 2..=5usize {
        let mut max = 0;
        for _ in 0..200 {
            let pts: Vec<[i64; 2]> = loop {
                let p: Vec<[i64; 2]> = (0..n).map(|_| [rng.random_range(-50..=50), rng.random_range(-50..=50)]).collect();
                if (0..n).all(|i| (i + 1..n).all(|j| p[i] != p[j])) {
                    break p;
                }
            };
            let c = count_distance_orders_exact(&integer_points(&pts)).map_err(|e| e.to_string())?;
            ensure(c.realized() as u128 <= bound(n as u128), || {
                format!("{pts:?} realizes {} orders, bound {}", c.realized(), bound(n as u128))
            })?;
            max = max.max(c.realized());
        }
        maxima.push(format!("n={n}: max {max} <= {}", bound(n as u128)));
    }
    Ok(maxima.join(", "))
}

fn many_to_one_zero_loss() -> Check {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = random_many_to_one_corpus(rng.random_range(2..=50), rng.random_range(1..=5), 6, seed)
            .map_err(|e| e.to_string())?;
        let layout = construct_many_to_one_layout(&corpus).map_err(|e| e.to_string())?;
        let loss = order_loss(&layout, &corpus).map_err(|e| e.to_string())?.value;
        ensure(loss == 0.0, || format!("seed {seed}: order loss {loss}"))?;
    }
    Ok("50 corpora, order loss exactly 0".into())
}

fn adversarial_instance() -> Check {
    let corpus = adversarial_corpus(4).map_err(|e| e.to_string())?;
    let report = search_adversarial_instance(&corpus, 100, 0, &SearchConfig::default()).map_err(|e| e.to_string())?;
    ensure(report.required_orders == 24 && report.exceeds_bound, || {
        format!("{} required orders, bound {}", report.required_orders, report.bound)
    })?;
    ensure(report.trials.len() == 100, || format!("{} trials", report.trials.len()))?;
    ensure(report.all_trials_positive(), || format!("min order loss {:?}", report.min_order_loss()))?;
    Ok(format!(
        "24 required orders > bound {}, min order loss over 100 trials {:.3e}",
        report.bound,
        report.min_order_loss().unwrap_or(f64::NAN)
    ))
}

// Metrics

fn metric_closed_forms() -> Check {
    let want = std::f64::consts::LN_2 + 0.5;
    let got = informativeness(&[0.9, 0.1], &[0.5, 0.5]).map_err(|e| e.to_string())?;
    ensure((got - want).abs() <= 1e-9, || format!("informativeness {got} vs {want}"))?;

    let a = [0.3, -1.2, 2.0];
    let b = [1.5, 0.4, -0.7];
    let set = [&a[..], &b[..]];
    let same = cmmd::<f64>(&set, &set, 1.0).map_err(|e| e.to_string())?.distance;
    ensure(same.abs() <= 1e-9, || format!("CMMD of identical sets {same}"))?;

    let v = [0.2, 0.5, -0.1, 0.9];
    let div = diversity(&[&v[..], &v[..], &v[..]], &[0, 0, 0]).map_err(|e| e.to_string())?;
    ensure(div == 0.0, || format!("diversity of identical embeddings {div}"))?;

    let base = [[0.0, 0.0], [0.3, 0.1], [-0.2, 0.4], [0.1, -0.3]];
    let refs: Vec<&[f64]> = base.iter().map(|p| &p[..]).collect();
    let mut values = Vec::new();
    for delta in [0.1, 1.0, 10.0] {
        let shifted: Vec<[f64; 2]> = base.iter().map(|p| [p[0] + delta, p[1]]).collect();
        let srefs: Vec<&[f64]> = shifted.iter().map(|p| &p[..]).collect();
        values.push(cmmd(&refs, &srefs, 1.0).map_err(|e| e.to_string())?.distance);
    }
    ensure(values[0] < values[1] && values[1] < values[2], || format!("CMMD over offsets {values:?}"))?;
    Ok(format!(
        "informativeness {got:.12}, CMMD identical {same:.1e}, diversity 0, CMMD over offsets {values:.4?}"
    ))
}

// Benchmark

fn benchmark_direction() -> Check {
    let config = BenchConfig::default();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 1..=5 {
        let r = run_seed::<f64>(&config, seed).map_err(|e| e.to_string())?;
        let m2m = r.report.row("m2m").unwrap();
        let base = r.report.row("order-loss").unwrap();
        let img = r.report.row("image-only").unwrap();
        if r.beats_baseline && r.intra_within_tolerance {
            wins += 1;
        }
        lines.push(format!(
            "seed {seed}: IMS {:.3}/{:.3} T {:.3}/{:.3} C {:.3}/{:.3} intra dT {:+.3} dC {:+.3}",
            m2m.ims,
            base.ims,
            m2m.t_inter,
            base.t_inter,
            m2m.c_inter,
            base.c_inter,
            m2m.t_intra - img.t_intra,
            m2m.c_intra - img.c_intra
        ));
    }
    let detail = format!("{wins}/5 seeds; {}", lines.join("; "));
    ensure(wins >= 4, || detail.clone())?;
    Ok(detail)
}

// Refinement

fn refinement() -> Check {
    for seed in 0..100u64 {
        let s = SteeringScenario::planted(seed, 8).map_err(|e| e.to_string())?;
        let cfg = EvolveConfig {
            seed: seed * 31 + 7,
            ..Default::default()
        };
        let target = if seed % 2 == 0 {
            s.target()
        } else {
            FeedbackTarget::Add {
                selected: s.remaining[..3].to_vec(),
            }
        };
        let (_, trace) = evolve(&s.prompt, &target, &s.classes, &s.generator, &s.mutator, &cfg).map_err(|e| e.to_string())?;
        ensure(trace.is_monotone(), || format!("run {seed} is not monotone"))?;
    }

    let s = SteeringScenario::planted(0, 16).map_err(|e| e.to_string())?;
    let (q, _) = s.run(&EvolveConfig::default()).map_err(|e| e.to_string())?;
    let initial = s.proxies(&s.prompt.text, 8).map_err(|e| e.to_string())?;
    let fin = s.proxies(&q.text, 8).map_err(|e| e.to_string())?;
    let to_remaining = mean_cos(&fin, &s.remaining);
    let to_deleted = mean_cos(&fin, &s.deleted);
    let before = mean_cos(&initial, &s.remaining);
    ensure(to_remaining > to_deleted && to_remaining > before, || {
        format!("{:?}: remaining {to_remaining:.4}, deleted {to_deleted:.4}, initial {before:.4}", q.text)
    })?;
    Ok(format!(
        "100 monotone runs; steering {:?}: remaining {to_remaining:.3} > deleted {to_deleted:.3}, initial {before:.3}",
        q.text
    ))
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

fn mean_cos(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flat_map(|x| b.iter().map(move |y| cos(x, y))).sum::<f64>() / (a.len() * b.len()) as f64
}

// Hierarchy

/// Every leaf lies under exactly one cut node, found by walking up the parents.
fn covers_once(tree: &LabelTree<f64>, cut: &TreeCut) -> bool {
    (0..tree.leaf_count()).all(|leaf| {
        let mut hits = 0;
        let mut cur = Some(leaf);
        while let Some(n) = cur {
            if cut.nodes.contains(&n) {
                hits += 1;
            }
            cur = tree.nodes[n].parent;
        }
        hits == 1
    })
}

fn hierarchy_tree_cut() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for t in 0..500 {
        let n = rng.random_range(1..=40);
        let labels: Vec<LabelRecord<f64>> = (0..n)
            .map(|i| {
                let v = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                LabelRecord::new(format!("l{i:03}"), format!("label {i}"), v)
            })
            .collect();
        let tree = build_hierarchy(&labels).map_err(|e| e.to_string())?;
        let focus = rng.random_range(0..tree.nodes.len());
        let budget = rng.random_range(1..=50);
        let cut = tree.tree_cut(focus, budget).map_err(|e| e.to_string())?;
        ensure(covers_once(&tree, &cut) && tree.is_antichain_cover(&cut), || {
            format!("triple {t}: {n} labels, focus {focus}, budget {budget} gives {:?}", cut.nodes)
        })?;
        ensure(cut.nodes.len() == budget.min(n), || {
            format!("triple {t}: {} nodes for budget {budget}", cut.nodes.len())
        })?;
        let root = tree.tree_cut(focus, 1).map_err(|e| e.to_string())?;
        ensure(root.nodes == vec![tree.root()], || format!("triple {t}: budget 1 gives {:?}", root.nodes))?;
        let leaves = tree.tree_cut(focus, n + rng.random_range(0..5)).map_err(|e| e.to_string())?;
        let mut got = leaves.nodes.clone();
        got.sort_unstable();
        ensure(got.iter().all(|&x| tree.nodes[x].is_leaf()) && got.len() == n, || {
            format!("triple {t}: budget >= leaves gives {:?}", leaves.nodes)
        })?;
    }
    Ok("500 triples: antichain covers, budget 1 is the root, large budgets are the leaves".into())
}

// Service

const DIM: usize = 16;

fn service_corpus() -> String {
    let embedder = MockEmbedder::new(0, DIM);
    let generator = MockGenerator::new(embedder.clone());
    let groups: [(&str, &str, &str, &[&str], usize); 3] = [
        ("cat-grass", "cat", "a photo of a cat grass", &["cat", "grass"], 8),
        ("cat-snow", "cat", "a photo of a cat snow", &["cat", "snow"], 8),
        ("dog", "dog", "a photo of a dog ball", &["dog", "ball"], 8),
    ];
    let mut images = Vec::new();
    let mut edges = Vec::new();
    for (g, (prefix, class, text, labels, n)) in groups.iter().enumerate() {
        for (i, v) in generator.generate(text, *n, 100 + g as u64).unwrap().into_iter().enumerate() {
            let id = format!("{prefix}-{i:02}");
            for l in labels.iter() {
                edges.push(EdgeSpec::new(id.clone(), *l));
            }
            images.push(ImageRecord::original(id, *class, v));
        }
    }
    let labels = ["cat", "grass", "snow", "dog", "ball"]
        .iter()
        .map(|t| LabelRecord::new(*t, *t, embedder.vector(t)))
        .collect();
    let corpus = Corpus::new(vec!["cat".into(), "dog".into()], DIM, images, labels, edges).unwrap();
    let mut out = Vec::new();
    write_corpus(&corpus, &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> Result<(StatusCode, Value), String> {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .map_err(|e| e.to_string())?;
    let resp = app.clone().oneshot(req).await.map_err(|e| e.to_string())?;
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.map_err(|e| e.to_string())?;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).map_err(|e| e.to_string())?
    };
    Ok((status, value))
}

async fn expect(app: &Router, method: Method, uri: &str, body: Option<Value>, want: StatusCode) -> Result<Value, String> {
    let (status, value) = call(app, method, uri, body).await?;
    ensure(status == want, || format!("{uri}: {status} {value}"))?;
    Ok(value)
}

fn service_contract() -> Check {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    runtime.block_on(service_flow())
}

async fn service_flow() -> Check {
    let app = expandr_service::app(expandr_service::SessionConfig::default());
    let config = json!({
        "seed": 3,
        "train": {"epochs": 5, "network": {"hidden": [16, 16, 8, 8, 4]}},
        "generation_count": 6
    });
    let created = expect(
        &app,
        Method::POST,
        "/sessions",
        Some(json!({"corpus": service_corpus(), "config": config})),
        StatusCode::CREATED,
    )
    .await?;
    let sid = created["id"].as_str().ok_or("no session id")?.to_string();
    let metrics = expect(&app, Method::GET, &format!("/sessions/{sid}/metrics"), None, StatusCode::OK).await?;
    let points_before = metrics["points"].as_array().map_or(0, Vec::len);
    let version_before = metrics["version"].as_u64().ok_or("no version")?;

    let ids: Vec<String> = (0..5).map(|i| format!("cat-snow-{i:02}")).collect();
    let job = expect(
        &app,
        Method::POST,
        &format!("/sessions/{sid}/feedback"),
        Some(json!({"kind": "delete", "class": "cat", "image_ids": ids})),
        StatusCode::ACCEPTED,
    )
    .await?;
    let jid = job["id"].as_str().ok_or("no job id")?.to_string();
    let mut state = Value::Null;
    for _ in 0..3000 {
        let job = expect(&app, Method::GET, &format!("/sessions/{sid}/jobs/{jid}"), None, StatusCode::OK).await?;
        state = job["state"].clone();
        if state != "running" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    ensure(state == "completed", || format!("job ended as {state}"))?;

    let writer = {
        let app = app.clone();
        let uri = format!("/sessions/{sid}/prompts/cat-prompt/accept");
        tokio::spawn(async move { call(&app, Method::POST, &uri, None).await })
    };
    let mut readers = Vec::new();
    for _ in 0..8 {
        let app = app.clone();
        let sid = sid.clone();
        readers.push(tokio::spawn(async move {
            let mut seen = Vec::new();
            for _ in 0..10 {
                let proj = expect(&app, Method::GET, &format!("/sessions/{sid}/projection"), None, StatusCode::OK).await?;
                let v = proj["version"].as_u64().ok_or("no version")?;
                seen.push((v, proj["images"].as_array().map_or(0, Vec::len)));
                tokio::task::yield_now().await;
            }
            Ok::<_, String>(seen)
        }));
    }
    let (status, accepted) = writer.await.map_err(|e| e.to_string())??;
    ensure(status == StatusCode::OK, || format!("accept: {status} {accepted}"))?;
    let mut reads = 0;
    for r in readers {
        for (version, images) in r.await.map_err(|e| e.to_string())?? {
            let want = 24 + 6 * (version - version_before) as usize;
            ensure(images == want, || format!("read at version {version} saw {images} images, expected {want}"))?;
            reads += 1;
        }
    }

    let metrics = expect(&app, Method::GET, &format!("/sessions/{sid}/metrics"), None, StatusCode::OK).await?;
    let points_after = metrics["points"].as_array().map_or(0, Vec::len);
    let version_after = metrics["version"].as_u64().ok_or("no version")?;
    ensure(version_after == version_before + 1, || format!("version {version_before} -> {version_after}"))?;
    ensure(points_after == points_before + 1, || format!("metric points {points_before} -> {points_after}"))?;
    Ok(format!(
        "version {version_before} -> {version_after}, metric points {points_before} -> {points_after}, {reads} concurrent reads consistent"
    ))
}
