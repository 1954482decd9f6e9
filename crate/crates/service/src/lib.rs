//! HTTP service around the expansion engine: sessions, snapshots and evolution jobs.

pub mod api;
pub mod engine;
pub mod error;
pub mod session;

pub use api::{app, router, serve, AppState};
pub use engine::{Engine, EngineError, SessionConfig, Snapshot};
pub use error::ApiError;
pub use session::{read_events, replay, Event, Job, JobState, ReplayError, Session};
