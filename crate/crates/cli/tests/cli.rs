use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use expandr_core::bench::{synthetic_corpus, GeneratorConfig};
use expandr_core::corpus::{save_corpus, EdgeSpec, ImageRecord};
use expandr_core::Corpus;
use serde_json::Value;

const FAST: &[&str] = &["--epochs", "3", "--hidden", "16,16,8,8,4", "--batch-size", "64"];

fn expandr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_expandr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = expandr(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small() -> Corpus {
    let config = GeneratorConfig {
        classes: 3,
        images_per_class: 20,
        labels_per_class: 2,
        shared_labels: 4,
        dimension: 16,
        ..GeneratorConfig::default()
    };
    synthetic_corpus(&config, 4).unwrap()
}

/// The small corpus plus two generated rounds copying perturbed originals of class 0.
fn with_rounds(corpus: &Corpus) -> Corpus {
    let mut images = Vec::new();
    let mut edges = Vec::new();
    for round in 1..=2u32 {
        for n in 0..5 {
            let src = &corpus.images[n];
            let id = format!("gen-{round}-{n}");
            let v: Vec<f64> = src.embedding.iter().enumerate().map(|(j, x)| x + 0.01 * (j + n) as f64).collect();
            images.push(ImageRecord::generated(id.clone(), src.class_name.clone(), round, v));
            for &l in corpus.graph.labels_of(n) {
                edges.push(EdgeSpec::new(id.clone(), corpus.labels[l].id.clone()));
            }
        }
    }
    corpus.with_generation(images, edges).unwrap()
}

fn write_corpus(dir: &Path, name: &str, corpus: &Corpus) -> PathBuf {
    let path = dir.join(name);
    save_corpus(corpus, &path).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn theory_bound_of_four_is_22() {
    assert_eq!(ok(&["theory", "--bound", "4"]).trim(), "22");
}

#[test]
fn theory_certifies_points_and_adversarial_instances() {
    let dir = tempfile::tempdir().unwrap();
    let pts = dir.path().join("p.json");
    std::fs::write(&pts, "[[0,0],[4,0],[0,3],[5,5]]").unwrap();
    let cert: Value = serde_json::from_str(&ok(&["theory", "--points", s(&pts)])).unwrap();
    assert_eq!(cert["n"], 4);
    assert!(cert["realized_orders"].as_array().unwrap().len() <= 22);

    let report: Value = serde_json::from_str(&ok(&["theory", "--adversarial", "4", "--trials", "0"])).unwrap();
    assert_eq!(report["required_orders"], 24);
    assert_eq!(report["exceeds_bound"], true);
    assert!(report["trials"].as_array().unwrap().is_empty());
}

#[test]
fn project_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), "c.jsonl", &small());
    let run = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        let mut args = vec!["project", "--corpus", s(&corpus), "--out", s(&out), "--seed", seed];
        args.extend_from_slice(FAST);
        ok(&args);
        std::fs::read(out).unwrap()
    };
    let a = run("7", "a.jsonl");
    let b = run("7", "b.jsonl");
    let c = run("8", "c.jsonl");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 60 + 10);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), "c.jsonl", &small());
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "seed = 1\nepochs = 3\nhidden = [16, 16, 8, 8, 4]\nbatch_size = 64\n").unwrap();
    let via_file = dir.path().join("file.jsonl");
    ok(&["project", "--config", s(&cfg), "--seed", "9", "--corpus", s(&corpus), "--out", s(&via_file)]);
    let direct = dir.path().join("direct.jsonl");
    let mut args = vec!["project", "--corpus", s(&corpus), "--out", s(&direct), "--seed", "9"];
    args.extend_from_slice(FAST);
    ok(&args);
    assert_eq!(std::fs::read(via_file).unwrap(), std::fs::read(direct).unwrap());

    std::fs::write(&cfg, "epochz = 3\n").unwrap();
    let out = expandr(&["theory", "--config", s(&cfg), "--bound", "3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]"));
}

#[test]
fn ingest_summarizes_and_rejects_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), "c.jsonl", &with_rounds(&small()));
    let canonical = dir.path().join("canon.jsonl");
    let summary: Value = serde_json::from_str(&ok(&["ingest", "--corpus", s(&corpus), "--out", s(&canonical)])).unwrap();
    assert_eq!(summary["images"], 70);
    assert_eq!(summary["generated"], 10);
    assert_eq!(summary["labels"], 10);
    assert_eq!(summary["iterations"], serde_json::json!([0, 1, 2]));
    assert_eq!(std::fs::read(&corpus).unwrap(), std::fs::read(&canonical).unwrap());

    let bad = dir.path().join("bad.jsonl");
    let mut text = std::fs::read_to_string(&corpus).unwrap();
    let line = format!("line {}", text.lines().count() + 1);
    text.push_str("{\"type\": \"edge\", \"image\": \"img-00-0000\"}\n");
    std::fs::write(&bad, text).unwrap();
    let out = expandr(&["ingest", "--corpus", s(&bad)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[ingest]"), "{err}");
    assert!(err.contains(&line), "{err}");
}

#[test]
fn metrics_prints_one_row_per_round_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), "c.jsonl", &with_rounds(&small()));
    let timeline = dir.path().join("t.jsonl");
    let svg = dir.path().join("t.svg");
    let table = ok(&["metrics", "--corpus", s(&corpus), "--out", s(&timeline), "--svg", s(&svg)]);
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().next().unwrap().contains("informativeness"));
    let points: Vec<Value> = std::fs::read_to_string(&timeline)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let counts: Vec<u64> = points.iter().map(|p| p["generated_count"].as_u64().unwrap()).collect();
    assert_eq!(counts, vec![0, 5, 10]);
    let chart = std::fs::read_to_string(&svg).unwrap();
    assert!(chart.starts_with("<svg") && chart.matches("<polyline").count() == 3);

    // Without generated rounds there is only the baseline point.
    let plain = write_corpus(dir.path(), "plain.jsonl", &small());
    assert_eq!(ok(&["metrics", "--corpus", s(&plain)]).lines().count(), 2);
}

#[test]
fn evaluate_reports_every_layout() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), "c.jsonl", &small());
    let trained = dir.path().join("trained.jsonl");
    let initial = dir.path().join("initial.jsonl");
    let mut args = vec!["project", "--corpus", s(&corpus), "--out", s(&trained)];
    args.extend_from_slice(FAST);
    ok(&args);
    let mut args = vec!["project", "--corpus", s(&corpus), "--out", s(&initial), "--epochs", "0"];
    args.extend_from_slice(&FAST[2..]);
    ok(&args);
    let spec = format!("start={}", s(&initial));
    let json = dir.path().join("r.json");
    let table = ok(&[
        "evaluate", "--corpus", s(&corpus), "--layout", s(&trained), "--layout", &spec, "--k", "5", "--json", s(&json),
    ]);
    assert!(table.contains("trained") && table.contains("start"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(report["k"], 5);
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    for row in report["rows"].as_array().unwrap() {
        for col in ["t_intra", "c_intra", "ims", "t_inter", "c_inter"] {
            let v = row[col].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{col}={v}");
        }
    }
}

#[test]
fn treecut_budget_one_is_the_root() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), "c.jsonl", &small());
    let cut: Value = serde_json::from_str(&ok(&["treecut", "--corpus", s(&corpus), "--budget", "1"])).unwrap();
    let nodes = cut["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 1);
    assert_eq!(nodes[0]["id"], 2 * 10 - 2);
    assert_eq!(nodes[0]["labels"].as_array().unwrap().len(), 10);

    let focused: Value =
        serde_json::from_str(&ok(&["treecut", "--corpus", s(&corpus), "--budget", "10", "--focus-label", "c01-1"])).unwrap();
    assert_eq!(focused["nodes"].as_array().unwrap().len(), 10);
    let out = expandr(&["treecut", "--corpus", s(&corpus), "--focus-label", "nope"]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[hierarchy]"));
}

#[test]
fn refine_emits_a_new_version_and_a_monotone_trace() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), "c.jsonl", &small());
    let feedback = dir.path().join("fb.json");
    std::fs::write(
        &feedback,
        r#"{"kind": "delete", "class": "class00", "image_ids": ["img-00-0000", "img-00-0001", "img-00-0002"]}"#,
    )
    .unwrap();
    let prompt = dir.path().join("prompt.txt");
    std::fs::write(&prompt, "a [photo | picture] of a class00\n").unwrap();
    let run = |name: &str| {
        let trace = dir.path().join(name);
        let out = ok(&[
            "refine", "--corpus", s(&corpus), "--feedback", s(&feedback), "--prompt", s(&prompt), "--trace", s(&trace),
            "--seed", "5",
        ]);
        (out, std::fs::read_to_string(trace).unwrap())
    };
    let (a, trace_a) = run("t1.json");
    let (b, trace_b) = run("t2.json");
    assert_eq!((a.clone(), trace_a.clone()), (b, trace_b));
    let next: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(next["class_name"], "class00");
    let trace: Value = serde_json::from_str(&trace_a).unwrap();
    let mut best = trace["initial_objective"].as_f64().unwrap();
    for step in trace["steps"].as_array().unwrap() {
        if step["accepted"] == true {
            let v = step["objective"].as_f64().unwrap();
            assert!(v > best);
            best = v;
        }
    }

    std::fs::write(&feedback, r#"{"kind": "delete", "class": "class00", "image_ids": ["ghost"]}"#).unwrap();
    let out = expandr(&["refine", "--corpus", s(&corpus), "--feedback", s(&feedback), "--prompt", s(&prompt)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[refine]"));
}

#[test]
fn bench_passes_on_seed_one() {
    let out = ok(&["bench", "--seed", "1"]);
    assert!(out.contains("m2m beat order-loss on 1/1 seeds"), "{out}");
    for method in ["initial", "m2m", "order-loss", "image-only"] {
        assert!(out.contains(method));
    }
}

#[test]
fn bench_exits_nonzero_when_the_assertion_fails() {
    let out = expandr(&[
        "bench", "--seed", "1", "--min-wins", "2", "--bench-classes", "2", "--images-per-class", "10", "--epochs", "1",
        "--hidden", "8,8,8,8,4", "--k", "5",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[bench]"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed 1"));
}

#[test]
fn serve_answers_over_http() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_expandr"))
        .args(["serve", "--addr", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited").unwrap();
        if let Some(rest) = line.split("addr=").nth(1) {
            break rest.split_whitespace().next().unwrap().to_string();
        }
    };
    let mut stream = std::net::TcpStream::connect(&addr).unwrap();
    stream
        .write_all(b"GET /sessions HTTP/1.1\r\nhost: localhost\r\nconnection: close\r\n\r\n")
        .unwrap();
    let mut reply = String::new();
    stream.read_to_string(&mut reply).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
}
