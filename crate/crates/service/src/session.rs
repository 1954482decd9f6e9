//! Sessions: versioned snapshots, serialized writers, evolution jobs and the event log.
//!
//! Every state change is a pure function from one snapshot to the next, shared by the live
//! handlers and by [`replay`], so a session rebuilt from its log matches the original.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use expandr_core::corpus::{read_corpus, CorpusError};
use expandr_core::refine::{evolve, EvolutionTrace, FeedbackAction, FeedbackTarget, PromptTemplate};
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineError, Recommendation, SessionConfig, Snapshot};
use crate::error::ApiError;

/// Entries of the append-only session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        config: SessionConfig,
        prompts: Vec<PromptTemplate>,
        /// The corpus as submitted, in the JSONL interchange format.
        corpus: String,
    },
    Feedback {
        job_id: String,
        action: FeedbackAction,
        prompt_id: String,
    },
    JobFinished {
        job_id: String,
        prompt_id: String,
        recommended: Option<String>,
        error: Option<String>,
    },
    Accepted {
        prompt_id: String,
        version: u32,
        corpus_version: u64,
    },
    Rejected {
        prompt_id: String,
    },
    Edited {
        prompt_id: String,
        version: u32,
        text: String,
    },
    Deleted {
        prompt_id: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub class: String,
    pub prompt_id: String,
    pub state: JobState,
    pub error: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("event log does not start with a create event")]
    MissingCreate,
    #[error("event log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("event {index}: {message}")]
    Step { index: usize, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Outcome = Result<(PromptTemplate, EvolutionTrace), String>;

// ---------------------------------------------------------------------------
// Transitions
// ---------------------------------------------------------------------------

fn unknown_prompt(prompt_id: &str) -> ApiError {
    ApiError::not_found("UnknownPrompt", format!("no prompt {prompt_id}"))
}

fn no_pending(prompt_id: &str) -> ApiError {
    ApiError::conflict("NoPendingPrompt", format!("prompt {prompt_id} has no recommendation"))
}

fn invalid_template(e: impl ToString) -> ApiError {
    ApiError::unprocessable("InvalidTemplate", e.to_string())
}

fn run_evolve(engine: &Engine, prompt: &PromptTemplate, target: &FeedbackTarget) -> Outcome {
    evolve(
        prompt,
        target,
        &engine.class_embeddings,
        engine.providers.generation.as_ref(),
        engine.providers.mutation.as_ref(),
        &engine.config.evolve,
    )
    .map_err(|e| e.to_string())
}

/// Resolves feedback into the prompt to evolve and the embedding sets to score against.
fn prepare_feedback(snapshot: &Snapshot, action: &FeedbackAction) -> Result<(PromptTemplate, FeedbackTarget), ApiError> {
    let target = action.target(snapshot.corpus.as_ref()).map_err(ApiError::from_refine)?;
    let prompt = snapshot
        .prompts
        .values()
        .find(|e| e.current.class_name == action.class_name)
        .map(|e| e.current.clone())
        .ok_or_else(|| ApiError::not_found("UnknownPrompt", format!("no prompt for class {}", action.class_name)))?;
    Ok((prompt, target))
}

/// Attaches a finished recommendation; `None` when the prompt no longer exists.
fn attach(snapshot: &Snapshot, job_id: &str, prompt_id: &str, template: PromptTemplate, trace: EvolutionTrace) -> Option<Snapshot> {
    let mut next = snapshot.clone();
    let entry = next.prompts.get_mut(prompt_id)?;
    entry.pending = Some(Recommendation {
        job_id: job_id.to_string(),
        template,
        trace,
    });
    Some(next)
}

/// Adopts the pending recommendation and runs a generation round with it.
fn accept_on(engine: &Engine, snapshot: &Snapshot, prompt_id: &str) -> Result<Snapshot, ApiError> {
    let entry = snapshot.prompts.get(prompt_id).ok_or_else(|| unknown_prompt(prompt_id))?;
    let pending = entry.pending.as_ref().ok_or_else(|| no_pending(prompt_id))?;
    // The adopted text always becomes the next version of the current prompt.
    let adopted = entry.current.successor(pending.template.text.clone()).map_err(invalid_template)?;
    let mut next = engine.generation_round(snapshot, &adopted).map_err(ApiError::from_engine)?;
    let entry = next.prompts.get_mut(prompt_id).expect("prompt present");
    entry.history.push(std::mem::replace(&mut entry.current, adopted));
    entry.pending = None;
    Ok(next)
}

fn reject_on(snapshot: &Snapshot, prompt_id: &str) -> Result<Snapshot, ApiError> {
    let mut next = snapshot.clone();
    let entry = next.prompts.get_mut(prompt_id).ok_or_else(|| unknown_prompt(prompt_id))?;
    entry.pending.take().ok_or_else(|| no_pending(prompt_id))?;
    Ok(next)
}

fn edit_on(snapshot: &Snapshot, prompt_id: &str, text: &str) -> Result<Snapshot, ApiError> {
    let mut next = snapshot.clone();
    let entry = next.prompts.get_mut(prompt_id).ok_or_else(|| unknown_prompt(prompt_id))?;
    let edited = entry.current.successor(text).map_err(invalid_template)?;
    entry.history.push(std::mem::replace(&mut entry.current, edited));
    Ok(next)
}

fn delete_on(snapshot: &Snapshot, prompt_id: &str) -> Result<Snapshot, ApiError> {
    let mut next = snapshot.clone();
    next.prompts.remove(prompt_id).ok_or_else(|| unknown_prompt(prompt_id))?;
    Ok(next)
}

// ---------------------------------------------------------------------------
// Live sessions
// ---------------------------------------------------------------------------

pub struct Session {
    pub id: String,
    pub engine: Arc<Engine>,
    snapshot: RwLock<Arc<Snapshot>>,
    /// Held for the whole of every state change so writes apply one at a time.
    writer: tokio::sync::Mutex<()>,
    jobs: Mutex<BTreeMap<String, Job>>,
    evolving: Mutex<HashSet<String>>,
    events: Mutex<Vec<Event>>,
    log_file: Mutex<Option<File>>,
    next_job: Mutex<u64>,
}

impl Session {
    fn assemble(id: String, engine: Engine, snapshot: Snapshot, events: Vec<Event>, jobs: BTreeMap<String, Job>) -> Self {
        let next_job = jobs
            .keys()
            .filter_map(|k| k.strip_prefix("job-")?.parse::<u64>().ok())
            .max()
            .unwrap_or(0);
        Self {
            id,
            engine: Arc::new(engine),
            snapshot: RwLock::new(Arc::new(snapshot)),
            writer: tokio::sync::Mutex::new(()),
            jobs: Mutex::new(jobs),
            evolving: Mutex::new(HashSet::new()),
            events: Mutex::new(events),
            log_file: Mutex::new(None),
            next_job: Mutex::new(next_job),
        }
    }

    /// Appends every future event to `path`; existing events are written first when the file
    /// is new or empty.
    pub fn persist_to(&self, path: &Path) -> std::io::Result<()> {
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() == 0 {
            for e in self.events() {
                writeln!(file, "{}", serde_json::to_string(&e).map_err(std::io::Error::other)?)?;
            }
            file.flush()?;
        }
        *self.log_file.lock().expect("log lock") = Some(file);
        Ok(())
    }

    /// The current snapshot; a read handler uses exactly one.
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn publish(&self, next: Snapshot) -> Arc<Snapshot> {
        let next = Arc::new(next);
        *self.snapshot.write().expect("snapshot lock") = Arc::clone(&next);
        next
    }

    fn log(&self, event: Event) {
        if let Some(file) = self.log_file.lock().expect("log lock").as_mut() {
            let written = serde_json::to_string(&event)
                .map_err(std::io::Error::other)
                .and_then(|line| writeln!(file, "{line}"))
                .and_then(|_| file.flush());
            if let Err(e) = written {
                tracing::warn!(session = %self.id, error = %e, "event log write failed");
            }
        }
        self.events.lock().expect("event lock").push(event);
    }

    pub fn events(&self) -> Vec<Event> {
        self.events.lock().expect("event lock").clone()
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.jobs.lock().expect("job lock").get(id).cloned()
    }

    pub fn jobs(&self) -> Vec<Job> {
        self.jobs.lock().expect("job lock").values().cloned().collect()
    }

    /// Validates the action and starts an evolution job for its class.
    pub fn submit_feedback(self: &Arc<Self>, action: FeedbackAction) -> Result<Job, ApiError> {
        let snapshot = self.snapshot();
        let (prompt, target) = prepare_feedback(&snapshot, &action)?;
        if !self.evolving.lock().expect("evolving lock").insert(action.class_name.clone()) {
            return Err(ApiError::conflict(
                "ConflictingJob",
                format!("class {} already has a running evolution job", action.class_name),
            ));
        }
        let id = {
            let mut n = self.next_job.lock().expect("job counter");
            *n += 1;
            format!("job-{}", *n)
        };
        let job = Job {
            id: id.clone(),
            class: action.class_name.clone(),
            prompt_id: prompt.id.clone(),
            state: JobState::Running,
            error: None,
        };
        self.jobs.lock().expect("job lock").insert(id.clone(), job.clone());
        self.log(Event::Feedback {
            job_id: id.clone(),
            action,
            prompt_id: prompt.id.clone(),
        });

        let session = Arc::clone(self);
        tokio::spawn(async move {
            let engine = Arc::clone(&session.engine);
            let run_prompt = prompt.clone();
            let outcome = tokio::task::spawn_blocking(move || run_evolve(&engine, &run_prompt, &target))
                .await
                .unwrap_or_else(|e| Err(format!("evolution task failed: {e}")));
            session.finish_job(&id, &prompt, outcome).await;
        });
        Ok(job)
    }

    async fn finish_job(&self, job_id: &str, prompt: &PromptTemplate, outcome: Outcome) {
        let _w = self.writer.lock().await;
        let (error, recommended) = match outcome {
            Ok((template, trace)) => {
                let text = template.text.clone();
                match attach(&self.snapshot(), job_id, &prompt.id, template, trace) {
                    Some(next) => {
                        self.publish(next);
                        (None, Some(text))
                    }
                    None => (Some(format!("prompt {} was deleted", prompt.id)), None),
                }
            }
            Err(e) => (Some(e), None),
        };
        if let Some(e) = &error {
            tracing::warn!(session = %self.id, job = job_id, error = %e, "evolution job failed");
        }
        self.log(Event::JobFinished {
            job_id: job_id.to_string(),
            prompt_id: prompt.id.clone(),
            recommended,
            error: error.clone(),
        });
        if let Some(job) = self.jobs.lock().expect("job lock").get_mut(job_id) {
            job.state = if error.is_some() { JobState::Failed } else { JobState::Completed };
            job.error = error;
        }
        self.evolving.lock().expect("evolving lock").remove(&prompt.class_name);
    }

    /// Adopts the pending recommendation, runs a generation round with it and publishes the
    /// next corpus version.
    pub async fn accept(&self, prompt_id: &str) -> Result<Arc<Snapshot>, ApiError> {
        let _w = self.writer.lock().await;
        let engine = Arc::clone(&self.engine);
        let base = self.snapshot();
        let pid = prompt_id.to_string();
        let next = tokio::task::spawn_blocking(move || accept_on(&engine, &base, &pid))
            .await
            .map_err(|e| ApiError::internal(format!("generation task failed: {e}")))??;
        let next = self.publish(next);
        self.log(Event::Accepted {
            prompt_id: prompt_id.to_string(),
            version: next.prompts[prompt_id].current.version,
            corpus_version: next.version,
        });
        Ok(next)
    }

    pub async fn reject(&self, prompt_id: &str) -> Result<Arc<Snapshot>, ApiError> {
        let _w = self.writer.lock().await;
        let next = self.publish(reject_on(&self.snapshot(), prompt_id)?);
        self.log(Event::Rejected {
            prompt_id: prompt_id.to_string(),
        });
        Ok(next)
    }

    /// Manual edit: the text becomes the next version of the prompt.
    pub async fn edit(&self, prompt_id: &str, text: String) -> Result<Arc<Snapshot>, ApiError> {
        let _w = self.writer.lock().await;
        let next = self.publish(edit_on(&self.snapshot(), prompt_id, &text)?);
        self.log(Event::Edited {
            prompt_id: prompt_id.to_string(),
            version: next.prompts[prompt_id].current.version,
            text,
        });
        Ok(next)
    }

    pub async fn delete_prompt(&self, prompt_id: &str) -> Result<(), ApiError> {
        let _w = self.writer.lock().await;
        self.publish(delete_on(&self.snapshot(), prompt_id)?);
        self.log(Event::Deleted {
            prompt_id: prompt_id.to_string(),
        });
        Ok(())
    }
}

/// Builds a session from corpus text; runs the training synchronously.
pub fn create_session(
    id: String,
    corpus: String,
    config: SessionConfig,
    prompts: Vec<PromptTemplate>,
) -> Result<Session, EngineError> {
    let parsed = read_corpus::<f64, _>(corpus.as_bytes())?;
    let (engine, snapshot) = Engine::start(parsed, config.clone(), prompts.clone())?;
    let created = Event::Created { config, prompts, corpus };
    Ok(Session::assemble(id, engine, snapshot, vec![created], BTreeMap::new()))
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// Reads a JSONL event log.
pub fn read_events(path: &Path) -> Result<Vec<Event>, ReplayError> {
    let mut events = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line).map_err(|e| ReplayError::Parse {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(events)
}

/// Rebuilds a session by re-running every logged step. Recomputed recommendations and corpus
/// versions must match the log. Jobs without a logged result were interrupted and are marked
/// failed.
pub fn replay(id: String, events: Vec<Event>) -> Result<Session, ReplayError> {
    let Some(Event::Created { config, prompts, corpus }) = events.first().cloned() else {
        return Err(ReplayError::MissingCreate);
    };
    let parsed = read_corpus::<f64, _>(corpus.as_bytes())?;
    let (engine, mut snapshot) = Engine::start(parsed, config, prompts)?;
    let mut jobs: BTreeMap<String, Job> = BTreeMap::new();
    let mut inputs: HashMap<String, (PromptTemplate, FeedbackTarget)> = HashMap::new();

    for (index, event) in events.iter().enumerate().skip(1) {
        let step = |message: String| ReplayError::Step { index, message };
        let api = |e: ApiError| ReplayError::Step {
            index,
            message: format!("{}: {}", e.code, e.message),
        };
        match event {
            Event::Created { .. } => return Err(step("second create event".into())),
            Event::Feedback { job_id, action, prompt_id } => {
                let (prompt, target) = prepare_feedback(&snapshot, action).map_err(api)?;
                if &prompt.id != prompt_id {
                    return Err(step(format!("feedback resolved to prompt {} instead of {prompt_id}", prompt.id)));
                }
                jobs.insert(
                    job_id.clone(),
                    Job {
                        id: job_id.clone(),
                        class: action.class_name.clone(),
                        prompt_id: prompt_id.clone(),
                        state: JobState::Running,
                        error: None,
                    },
                );
                inputs.insert(job_id.clone(), (prompt, target));
            }
            Event::JobFinished { job_id, prompt_id, recommended, error } => {
                let (prompt, target) = inputs
                    .remove(job_id)
                    .ok_or_else(|| step(format!("result for unknown job {job_id}")))?;
                if let Some(text) = recommended {
                    let (template, trace) = run_evolve(&engine, &prompt, &target).map_err(step)?;
                    if &template.text != text {
                        return Err(step(format!("recomputed recommendation `{}` differs from `{text}`", template.text)));
                    }
                    snapshot = attach(&snapshot, job_id, prompt_id, template, trace)
                        .ok_or_else(|| step(format!("prompt {prompt_id} is missing")))?;
                }
                let job = jobs.get_mut(job_id).expect("job registered with its feedback");
                job.state = if error.is_some() { JobState::Failed } else { JobState::Completed };
                job.error = error.clone();
            }
            Event::Accepted { prompt_id, corpus_version, .. } => {
                snapshot = accept_on(&engine, &snapshot, prompt_id).map_err(api)?;
                if snapshot.version != *corpus_version {
                    return Err(step(format!("corpus version {} instead of {corpus_version}", snapshot.version)));
                }
            }
            Event::Rejected { prompt_id } => snapshot = reject_on(&snapshot, prompt_id).map_err(api)?,
            Event::Edited { prompt_id, text, .. } => snapshot = edit_on(&snapshot, prompt_id, text).map_err(api)?,
            Event::Deleted { prompt_id } => snapshot = delete_on(&snapshot, prompt_id).map_err(api)?,
        }
    }
    for job_id in inputs.keys() {
        let job = jobs.get_mut(job_id).expect("job registered with its feedback");
        job.state = JobState::Failed;
        job.error = Some("interrupted before completion".into());
    }
    Ok(Session::assemble(id, engine, snapshot, events, jobs))
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// All sessions of one service instance, optionally persisted under a log directory.
#[derive(Default)]
pub struct Registry {
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    log_dir: Option<PathBuf>,
}

impl Registry {
    /// A registry that logs to `dir` and starts with every session replayed from it.
    pub fn restore(dir: impl Into<PathBuf>) -> Result<Self, ReplayError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let registry = Self {
            sessions: RwLock::default(),
            log_dir: Some(dir.clone()),
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        paths.retain(|p| p.extension().is_some_and(|x| x == "jsonl"));
        paths.sort();
        for path in paths {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let session = replay(id.clone(), read_events(&path)?)?;
            session.persist_to(&path)?;
            tracing::info!(session = %id, "session restored");
            registry.sessions.write().expect("registry lock").insert(id, Arc::new(session));
        }
        Ok(registry)
    }

    pub fn insert(&self, session: Session) -> std::io::Result<Arc<Session>> {
        if let Some(dir) = &self.log_dir {
            session.persist_to(&dir.join(format!("{}.jsonl", session.id)))?;
        }
        let session = Arc::new(session);
        self.sessions
            .write()
            .expect("registry lock")
            .insert(session.id.clone(), Arc::clone(&session));
        Ok(session)
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .read()
            .expect("registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("UnknownSession", format!("no session {id}")))
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().expect("registry lock").keys().cloned().collect();
        ids.sort();
        ids
    }
}
