//! Per-user memory registry shared by the HTTP service and the REPL.

pub mod api;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use dashmap::DashMap;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use ltm_core::memory::{Hit, WriteOutcome};
use ltm_core::remote::{HttpClassifier, HttpEncoder, HttpGenerator};
use ltm_core::{
    BackendError, Engine, EngineConfig, Error, PersonaSentence, Session, SharedMemory, Speaker, TurnOutcome,
};

pub const ENV_ENCODER_URL: &str = "LTM_ENCODER_URL";
pub const ENV_CLASSIFIER_URL: &str = "LTM_CLASSIFIER_URL";
pub const ENV_GENERATOR_URL: &str = "LTM_GENERATOR_URL";

/// Remote model endpoints; any that is unset falls back to the built-in reference model.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BackendUrls {
    pub encoder: Option<String>,
    pub classifier: Option<String>,
    pub generator: Option<String>,
}

impl BackendUrls {
    pub fn from_env() -> Self {
        let var = |k| std::env::var(k).ok().filter(|v: &String| !v.trim().is_empty());
        Self {
            encoder: var(ENV_ENCODER_URL),
            classifier: var(ENV_CLASSIFIER_URL),
            generator: var(ENV_GENERATOR_URL),
        }
    }

    pub fn build_engine(&self, cfg: EngineConfig) -> ltm_core::Result<Engine> {
        let dim = cfg.embedding_dim;
        let mut engine = Engine::reference(cfg)?;
        if let Some(url) = &self.encoder {
            engine = engine.with_encoder(Arc::new(HttpEncoder::new(url, dim)));
        }
        if let Some(url) = &self.classifier {
            engine = engine.with_classifier(Arc::new(HttpClassifier::new(url)));
        }
        if let Some(url) = &self.generator {
            engine = engine.with_generator(Arc::new(HttpGenerator::new(url)));
        }
        Ok(engine)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub user: Vec<Hit>,
    pub bot: Vec<Hit>,
}

/// What a turn returns to callers, over HTTP and in the REPL alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnReply {
    pub session_id: String,
    pub turn_index: u32,
    pub response_text: Option<String>,
    pub retrieved: Retrieved,
    pub extracted: Vec<PersonaSentence>,
    pub writes: Vec<WriteOutcome>,
}

impl TurnReply {
    pub fn new(session_id: &str, o: &TurnOutcome) -> Self {
        Self {
            session_id: session_id.to_string(),
            turn_index: o.user_utterance.turn_index,
            response_text: o.response_text().map(str::to_string),
            retrieved: Retrieved {
                user: o.retrieved_user.hits.clone(),
                bot: o.retrieved_bot.hits.clone(),
            },
            extracted: o.extracted_user.iter().chain(&o.extracted_bot).cloned().collect(),
            writes: o.user_writes.iter().chain(&o.bot_writes).cloned().collect(),
        }
    }
}

/// A stored entry as listed to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryView {
    pub persona: PersonaSentence,
    pub written_at: u64,
    pub replaced_count: u32,
}

#[derive(Debug)]
pub enum ServiceError {
    NotFound(String),
    BadRequest(String),
    Backend(BackendError),
    Internal(Error),
}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        match e {
            Error::Backend(b) => ServiceError::Backend(b),
            Error::InvalidInput(m) => ServiceError::BadRequest(m),
            other => ServiceError::Internal(other),
        }
    }
}

impl std::fmt::Display for ServiceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ServiceError::NotFound(m) | ServiceError::BadRequest(m) => f.write_str(m),
            ServiceError::Backend(e) => e.fmt(f),
            ServiceError::Internal(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for ServiceError {}

#[derive(Debug)]
struct UserSlot {
    memory: Arc<SharedMemory>,
    session: Mutex<Option<Session>>,
    sessions_started: AtomicU64,
}

/// One memory pair per user id, shared by all of that user's sessions.
#[derive(Debug)]
pub struct Users {
    engine: Engine,
    data_dir: Option<PathBuf>,
    slots: DashMap<String, Arc<UserSlot>>,
}

fn check_user_id(user_id: &str) -> Result<(), ServiceError> {
    let ok = !user_id.is_empty()
        && user_id.len() <= 128
        && !user_id.starts_with('.')
        && user_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ServiceError::BadRequest(format!("invalid user id {user_id:?}")))
    }
}

impl Users {
    /// With a data directory each user's memories live in `<data_dir>/<user_id>/`.
    pub fn new(engine: Engine, data_dir: Option<PathBuf>) -> Self {
        Self {
            engine,
            data_dir,
            slots: DashMap::new(),
        }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.data_dir.as_deref()
    }

    fn user_dir(&self, user_id: &str) -> Option<PathBuf> {
        self.data_dir.as_ref().map(|d| d.join(user_id))
    }

    fn slot(&self, user_id: &str, create: bool) -> Result<Arc<UserSlot>, ServiceError> {
        check_user_id(user_id)?;
        if let Some(s) = self.slots.get(user_id) {
            return Ok(Arc::clone(&s));
        }
        let dir = self.user_dir(user_id);
        let on_disk = dir.as_ref().is_some_and(|d| d.is_dir());
        if !create && !on_disk {
            return Err(ServiceError::NotFound(format!("unknown user {user_id}")));
        }
        let entry = self.slots.entry(user_id.to_string()).or_try_insert_with(|| {
            let memory = match &dir {
                Some(d) => SharedMemory::open(&self.engine, d)?,
                None => SharedMemory::in_memory(&self.engine),
            };
            Ok::<_, Error>(Arc::new(UserSlot {
                memory: Arc::new(memory),
                session: Mutex::new(None),
                sessions_started: AtomicU64::new(0),
            }))
        })?;
        Ok(Arc::clone(&entry))
    }

    /// Starts a new session for `user_id`, replacing any running one. Returns its id.
    pub fn start_session(&self, user_id: &str) -> Result<String, ServiceError> {
        let slot = self.slot(user_id, true)?;
        let n = slot.sessions_started.fetch_add(1, Ordering::SeqCst) + 1;
        let session_id = format!("{user_id}-s{n}");
        *slot.session.lock() = Some(Session::new(Arc::clone(&slot.memory), &session_id, user_id));
        Ok(session_id)
    }

    /// Runs one turn in the user's current session. User turns get a generated reply.
    pub fn turn(&self, user_id: &str, speaker: Speaker, text: &str) -> Result<TurnReply, ServiceError> {
        check_user_id(user_id)?;
        let slot = self
            .slots
            .get(user_id)
            .map(|s| Arc::clone(&s))
            .ok_or_else(|| ServiceError::NotFound(format!("no session for user {user_id}")))?;
        let mut guard = slot.session.lock();
        let session = guard
            .as_mut()
            .ok_or_else(|| ServiceError::NotFound(format!("no session for user {user_id}")))?;
        let outcome = match speaker {
            Speaker::User => session.user_turn(&self.engine, text)?,
            Speaker::Bot => session.observe(&self.engine, Speaker::Bot, text)?,
        };
        Ok(TurnReply::new(&session.context.session_id, &outcome))
    }

    pub fn memories(&self, user_id: &str, owner: Speaker) -> Result<Vec<MemoryView>, ServiceError> {
        let slot = self.slot(user_id, false)?;
        let store = slot.memory.store(owner);
        Ok(store
            .entries()
            .iter()
            .map(|e| MemoryView {
                persona: e.persona.clone(),
                written_at: e.written_at,
                replaced_count: e.replaced_count,
            })
            .collect())
    }

    /// Deletes every memory of the user, on disk included. Running sessions keep their context.
    pub fn purge(&self, user_id: &str) -> Result<(), ServiceError> {
        let slot = self.slot(user_id, false)?;
        slot.memory.purge(&self.engine)?;
        Ok(())
    }

    /// Snapshots every loaded user with persistence.
    pub fn checkpoint_all(&self) -> Result<(), ServiceError> {
        for slot in self.slots.iter() {
            slot.memory.checkpoint()?;
        }
        Ok(())
    }
}
