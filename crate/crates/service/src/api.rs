//! REST routes. Every read handler works on one snapshot and reports its `version`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use expandr_core::corpus::{CorpusError, ImageKind, Modality};
use expandr_core::hierarchy::HierarchyError;
use expandr_core::refine::{FeedbackAction, PromptTemplate};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::engine::{latest_metric, SessionConfig, Snapshot};
use crate::error::ApiError;
use crate::session::{create_session, Registry, ReplayError, Session};

#[derive(Clone, Default)]
pub struct AppState {
    pub registry: Arc<Registry>,
    /// Applied to sessions created without a config of their own.
    pub defaults: Arc<SessionConfig>,
}

impl AppState {
    pub fn new(defaults: SessionConfig) -> Self {
        Self {
            registry: Arc::new(Registry::default()),
            defaults: Arc::new(defaults),
        }
    }

    /// Sessions are logged under `dir`, and the ones already there are replayed first.
    pub fn persistent(defaults: SessionConfig, dir: impl Into<PathBuf>) -> Result<Self, ReplayError> {
        Ok(Self {
            registry: Arc::new(Registry::restore(dir)?),
            defaults: Arc::new(defaults),
        })
    }
}

/// In-memory service.
pub fn app(defaults: SessionConfig) -> Router {
    router(AppState::new(defaults))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create).get(list_sessions))
        .route("/sessions/{id}", get(session_summary))
        .route("/sessions/{id}/projection", get(projection))
        .route("/sessions/{id}/treecut", get(treecut))
        .route("/sessions/{id}/tree", get(tree))
        .route("/sessions/{id}/metrics", get(metrics))
        .route("/sessions/{id}/labels", get(labels))
        .route("/sessions/{id}/images", get(images))
        .route("/sessions/{id}/images/{iid}", get(image))
        .route("/sessions/{id}/prompts", get(prompts))
        .route("/sessions/{id}/prompts/{pid}", axum::routing::patch(edit_prompt).delete(delete_prompt))
        .route("/sessions/{id}/prompts/{pid}/accept", post(accept))
        .route("/sessions/{id}/prompts/{pid}/reject", post(reject))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/jobs", get(jobs))
        .route("/sessions/{id}/jobs/{jid}", get(job))
        .route("/sessions/{id}/events", get(events))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends. With `log_dir`, sessions survive restarts.
pub async fn serve(addr: SocketAddr, defaults: SessionConfig, log_dir: Option<PathBuf>) -> std::io::Result<()> {
    let state = match log_dir {
        Some(dir) => {
            let restore = move || AppState::persistent(defaults, dir);
            tokio::task::spawn_blocking(restore)
                .await
                .map_err(std::io::Error::other)?
                .map_err(std::io::Error::other)?
        }
        None => AppState::new(defaults),
    };
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}

type ApiResult = Result<(StatusCode, Json<Value>), ApiError>;

fn ok(body: Value) -> ApiResult {
    Ok((StatusCode::OK, Json(body)))
}

fn json_body<T>(body: Result<Json<T>, axum::extract::rejection::JsonRejection>) -> Result<T, ApiError> {
    body.map(|Json(v)| v)
        .map_err(|e| ApiError::unprocessable("MalformedRequest", e.body_text()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptSpec {
    id: Option<String>,
    class: String,
    text: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    corpus_path: Option<String>,
    /// Inline corpus in the JSONL interchange format.
    corpus: Option<String>,
    config: Option<SessionConfig>,
    #[serde(default)]
    prompts: Vec<PromptSpec>,
}

async fn create(
    State(state): State<AppState>,
    body: Result<Json<CreateRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult {
    let req = json_body(body)?;
    let corpus = match (req.corpus_path, req.corpus) {
        (Some(path), None) => std::fs::read_to_string(&path)
            .map_err(|e| ApiError::from_corpus(CorpusError::Io(e)).with_detail(json!({ "path": path })))?,
        (None, Some(text)) => text,
        _ => {
            return Err(ApiError::unprocessable(
                "MalformedRequest",
                "exactly one of corpus_path and corpus is required",
            ))
        }
    };
    let prompts = req
        .prompts
        .iter()
        .map(|p| {
            let id = p.id.clone().unwrap_or_else(|| format!("{}-prompt", p.class));
            PromptTemplate::new(id, p.class.clone(), p.text.clone())
                .map_err(|e| ApiError::unprocessable("InvalidTemplate", e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let config = req.config.unwrap_or_else(|| (*state.defaults).clone());
    let id = uuid::Uuid::new_v4().to_string();
    let session_id = id.clone();
    let session = tokio::task::spawn_blocking(move || create_session(session_id, corpus, config, prompts))
        .await
        .map_err(|e| ApiError::internal(format!("session setup failed: {e}")))?
        .map_err(ApiError::from_engine)?;
    let session = state
        .registry
        .insert(session)
        .map_err(|e| ApiError::internal(format!("event log: {e}")))?;
    tracing::info!(session = %id, "session created");
    Ok((StatusCode::CREATED, Json(summary(&session, &session.snapshot()))))
}

async fn list_sessions(State(state): State<AppState>) -> ApiResult {
    ok(json!({ "sessions": state.registry.ids() }))
}

fn summary(session: &Session, s: &Snapshot) -> Value {
    let generated = s.corpus.images.iter().filter(|i| i.kind == ImageKind::Generated).count();
    json!({
        "id": session.id,
        "version": s.version,
        "classes": s.corpus.classes,
        "dimension": s.corpus.dimension,
        "images": s.corpus.images.len(),
        "generated": generated,
        "labels": s.corpus.labels.len(),
        "edges": s.corpus.graph.edges.len(),
        "prompts": s.prompts.keys().collect::<Vec<_>>(),
        "metrics": latest_metric(s),
    })
}

async fn session_summary(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let session = state.registry.get(&id)?;
    ok(summary(&session, &session.snapshot()))
}

async fn projection(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = state.registry.get(&id)?.snapshot();
    let images: Vec<Value> = s
        .corpus
        .images
        .iter()
        .zip(&s.layout.images)
        .map(|(img, p)| {
            json!({"id": img.id, "modality": Modality::Image, "x": p[0], "y": p[1],
                   "class": img.class_name, "kind": img.kind, "iteration": img.iteration})
        })
        .collect();
    let labels: Vec<Value> = s
        .corpus
        .labels
        .iter()
        .zip(&s.layout.labels)
        .map(|(l, p)| json!({"id": l.id, "modality": Modality::Label, "x": p[0], "y": p[1], "text": l.text}))
        .collect();
    ok(json!({ "version": s.version, "images": images, "labels": labels }))
}

fn hierarchy_error(e: HierarchyError) -> ApiError {
    match e {
        HierarchyError::UnknownNode(n) => ApiError::not_found("UnknownNode", format!("no tree node {n}")),
        HierarchyError::UnknownLabel(l) => ApiError::not_found("UnknownNode", format!("no label {l}")),
        HierarchyError::ZeroBudget => ApiError::unprocessable("InvalidBudget", "budget must be at least 1"),
        other => ApiError::unprocessable("HierarchyFailure", other.to_string()),
    }
}

#[derive(Debug, Deserialize)]
struct CutQuery {
    focus: Option<usize>,
    /// Focus given by label id instead of node id.
    focus_label: Option<String>,
    budget: Option<usize>,
}

async fn treecut(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<CutQuery>) -> ApiResult {
    let session = state.registry.get(&id)?;
    let s = session.snapshot();
    let tree = &s.tree;
    let focus = match (q.focus, &q.focus_label) {
        (Some(f), _) => f,
        (None, Some(label)) => tree
            .leaf_of(label)
            .ok_or_else(|| hierarchy_error(HierarchyError::UnknownLabel(label.clone())))?,
        (None, None) => tree.root(),
    };
    let budget = q.budget.unwrap_or(session.engine.config.budget);
    let cut = tree.tree_cut(focus, budget).map_err(hierarchy_error)?;
    let doi = tree.scaled_doi(focus).map_err(hierarchy_error)?;
    let nodes: Vec<Value> = cut
        .nodes
        .iter()
        .map(|&n| {
            let node = &tree.nodes[n];
            let labels: Vec<&String> = node.members.iter().map(|&m| &tree.label_ids[m]).collect();
            json!({
                "id": n,
                "name": node.name,
                "leaf": node.is_leaf(),
                "labels": labels,
                "original_count": node.original,
                "generated_count": node.generated,
                "ratio": node.generated as f64 / node.original.max(1) as f64,
                "doi": doi[n],
            })
        })
        .collect();
    ok(json!({ "version": s.version, "focus": focus, "budget": budget, "nodes": nodes }))
}

async fn tree(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = state.registry.get(&id)?.snapshot();
    ok(json!({ "version": s.version, "root": s.tree.to_json() }))
}

async fn metrics(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = state.registry.get(&id)?.snapshot();
    ok(json!({ "version": s.version, "points": s.timeline.points }))
}

/// Labels ordered by generated/original ratio, highest first.
async fn labels(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = state.registry.get(&id)?.snapshot();
    let mut rows: Vec<(f64, Value)> = s
        .corpus
        .labels
        .iter()
        .enumerate()
        .map(|(l, label)| {
            let (mut original, mut generated) = (0usize, 0usize);
            for &i in s.corpus.graph.images_of(l) {
                match s.corpus.images[i].kind {
                    ImageKind::Original => original += 1,
                    ImageKind::Generated => generated += 1,
                }
            }
            let ratio = generated as f64 / original.max(1) as f64;
            let row = json!({"id": label.id, "text": label.text, "original_count": original,
                             "generated_count": generated, "ratio": ratio});
            (ratio, row)
        })
        .collect();
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));
    ok(json!({ "version": s.version, "labels": rows.into_iter().map(|r| r.1).collect::<Vec<_>>() }))
}

#[derive(Debug, Deserialize)]
struct ImageQuery {
    class: Option<String>,
    kind: Option<ImageKind>,
    label: Option<String>,
    iteration: Option<u32>,
}

fn image_json(s: &Snapshot, i: usize, detail: bool) -> Value {
    let img = &s.corpus.images[i];
    let labels: Vec<&String> = s.corpus.graph.labels_of(i).iter().map(|&l| &s.corpus.labels[l].id).collect();
    let p = s.layout.images[i];
    let mut v = json!({
        "id": img.id,
        "class": img.class_name,
        "kind": img.kind,
        "iteration": img.iteration,
        "prompt_id": img.prompt_id,
        "caption": img.caption,
        "image_path": img.image_path,
        "labels": labels,
        "x": p[0],
        "y": p[1],
    });
    if detail {
        v["prediction"] = json!(img.prediction);
        v["label_texts"] = json!(s.corpus.graph.labels_of(i).iter().map(|&l| &s.corpus.labels[l].text).collect::<Vec<_>>());
    }
    v
}

async fn images(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<ImageQuery>) -> ApiResult {
    let s = state.registry.get(&id)?.snapshot();
    let label = match &q.label {
        Some(l) => Some(
            s.corpus
                .label_position(l)
                .ok_or_else(|| ApiError::not_found("UnknownLabel", format!("no label {l}")))?,
        ),
        None => None,
    };
    let rows: Vec<Value> = (0..s.corpus.images.len())
        .filter(|&i| {
            let img = &s.corpus.images[i];
            q.class.as_ref().is_none_or(|c| &img.class_name == c)
                && q.kind.is_none_or(|k| img.kind == k)
                && q.iteration.is_none_or(|it| img.iteration == it)
                && label.is_none_or(|l| s.corpus.graph.contains(i, l))
        })
        .map(|i| image_json(&s, i, false))
        .collect();
    ok(json!({ "version": s.version, "images": rows }))
}

async fn image(State(state): State<AppState>, Path((id, iid)): Path<(String, String)>) -> ApiResult {
    let s = state.registry.get(&id)?.snapshot();
    let i = s
        .corpus
        .image_position(&iid)
        .ok_or_else(|| ApiError::not_found("UnknownImage", format!("no image {iid}")))?;
    let mut v = image_json(&s, i, true);
    v["version"] = json!(s.version);
    ok(v)
}

fn prompts_json(s: &Snapshot) -> Value {
    json!({ "version": s.version, "prompts": s.prompts.values().collect::<Vec<_>>() })
}

async fn prompts(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = state.registry.get(&id)?.snapshot();
    ok(prompts_json(&s))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditRequest {
    text: String,
}

async fn edit_prompt(
    State(state): State<AppState>,
    Path((id, pid)): Path<(String, String)>,
    body: Result<Json<EditRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult {
    let session = state.registry.get(&id)?;
    let req = json_body(body)?;
    let s = session.edit(&pid, req.text).await?;
    ok(json!({ "version": s.version, "prompt": s.prompts[&pid] }))
}

async fn delete_prompt(
    State(state): State<AppState>,
    Path((id, pid)): Path<(String, String)>,
) -> Result<impl IntoResponse, ApiError> {
    let session = state.registry.get(&id)?;
    session.delete_prompt(&pid).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn accept(State(state): State<AppState>, Path((id, pid)): Path<(String, String)>) -> ApiResult {
    let session = state.registry.get(&id)?;
    let s = session.accept(&pid).await?;
    ok(json!({ "version": s.version, "prompt": s.prompts[&pid], "metric": latest_metric(&s) }))
}

async fn reject(State(state): State<AppState>, Path((id, pid)): Path<(String, String)>) -> ApiResult {
    let session = state.registry.get(&id)?;
    let s = session.reject(&pid).await?;
    ok(json!({ "version": s.version, "prompt": s.prompts[&pid] }))
}

async fn feedback(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<FeedbackAction>, axum::extract::rejection::JsonRejection>,
) -> ApiResult {
    let session = state.registry.get(&id)?;
    let action = json_body(body)?;
    let job = session.submit_feedback(action)?;
    Ok((StatusCode::ACCEPTED, Json(json!(job))))
}

async fn jobs(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let session = state.registry.get(&id)?;
    ok(json!({ "jobs": session.jobs() }))
}

async fn job(State(state): State<AppState>, Path((id, jid)): Path<(String, String)>) -> ApiResult {
    let session = state.registry.get(&id)?;
    let job = session
        .job(&jid)
        .ok_or_else(|| ApiError::not_found("UnknownJob", format!("no job {jid}")))?;
    ok(json!(job))
}

async fn events(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let session = state.registry.get(&id)?;
    ok(json!({ "events": session.events() }))
}
