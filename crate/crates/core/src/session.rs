//! Publishing turns to a user's memory pair.
//!
//! Readers take cheap `Arc` snapshots of both stores. A turn is published by
//! logging its writes and then swapping both stores while holding both
//! write locks, so a reader observes a turn entirely or not at all.

use std::path::Path;
use std::sync::Arc;

use parking_lot::{Mutex, MutexGuard, RwLock};

use crate::error::Result;
use crate::memory::{MemoryDir, MemoryStore};
use crate::pipeline::{Engine, TurnOutcome, TurnPlan};
use crate::types::{DialogueContext, Speaker};

#[derive(Debug)]
pub struct SharedMemory {
    user: RwLock<Arc<MemoryStore>>,
    bot: RwLock<Arc<MemoryStore>>,
    dir: Mutex<Option<MemoryDir>>,
    turn_lock: Mutex<()>,
}

impl SharedMemory {
    /// Volatile memories.
    pub fn in_memory(engine: &Engine) -> Self {
        Self::from_stores(engine.empty_store(Speaker::User), engine.empty_store(Speaker::Bot), None)
    }

    /// Memories backed by `dir`, recovered from its snapshots and log.
    pub fn open(engine: &Engine, dir: impl AsRef<Path>) -> Result<Self> {
        let (dir, rec) = MemoryDir::open(dir, engine.config(), engine.encoder())?;
        Ok(Self::from_stores(rec.user, rec.bot, Some(dir)))
    }

    pub fn from_stores(user: MemoryStore, bot: MemoryStore, dir: Option<MemoryDir>) -> Self {
        Self {
            user: RwLock::new(Arc::new(user)),
            bot: RwLock::new(Arc::new(bot)),
            dir: Mutex::new(dir),
            turn_lock: Mutex::new(()),
        }
    }

    /// Consistent view of both stores.
    pub fn current(&self) -> (Arc<MemoryStore>, Arc<MemoryStore>) {
        let u = self.user.read();
        let b = self.bot.read();
        (Arc::clone(&u), Arc::clone(&b))
    }

    pub fn store(&self, owner: Speaker) -> Arc<MemoryStore> {
        match owner {
            Speaker::User => Arc::clone(&self.user.read()),
            Speaker::Bot => Arc::clone(&self.bot.read()),
        }
    }

    pub fn is_persistent(&self) -> bool {
        self.dir.lock().is_some()
    }

    /// Serializes turns on this memory pair.
    pub fn lock_turns(&self) -> MutexGuard<'_, ()> {
        self.turn_lock.lock()
    }

    /// Logs the plan's writes, then publishes its stores. On error nothing is published.
    pub fn publish(&self, plan: &mut TurnPlan) -> Result<()> {
        let mut dir = self.dir.lock();
        if let Some(dir) = dir.as_mut() {
            dir.log_turn(&plan.writes, &mut plan.user, &mut plan.bot)?;
        }
        {
            let mut u = self.user.write();
            let mut b = self.bot.write();
            *u = Arc::new(plan.user.clone());
            *b = Arc::new(plan.bot.clone());
        }
        if let Some(dir) = dir.as_mut() {
            if dir.checkpoint_due() {
                let (u, b) = self.current();
                dir.checkpoint(&u, &b)?;
            }
        }
        Ok(())
    }

    /// Snapshots both stores and clears the log.
    pub fn checkpoint(&self) -> Result<()> {
        let mut dir = self.dir.lock();
        if let Some(dir) = dir.as_mut() {
            let (u, b) = self.current();
            dir.checkpoint(&u, &b)?;
        }
        Ok(())
    }

    /// Empties both stores and deletes their files; a persistent pair starts a fresh directory.
    pub fn purge(&self, engine: &Engine) -> Result<()> {
        let _turns = self.turn_lock.lock();
        let mut dir = self.dir.lock();
        let reopened = match dir.take() {
            Some(d) => {
                let path = d.dir().to_path_buf();
                d.purge()?;
                Some(MemoryDir::open(&path, engine.config(), engine.encoder())?.0)
            }
            None => None,
        };
        *dir = reopened;
        *self.user.write() = Arc::new(engine.empty_store(Speaker::User));
        *self.bot.write() = Arc::new(engine.empty_store(Speaker::Bot));
        Ok(())
    }
}

/// One conversation session over a (possibly shared) memory pair.
#[derive(Debug)]
pub struct Session {
    pub memory: Arc<SharedMemory>,
    pub context: DialogueContext,
}

impl Session {
    pub fn new(memory: Arc<SharedMemory>, session_id: impl Into<String>, episode_id: impl Into<String>) -> Self {
        Self {
            memory,
            context: DialogueContext::new(session_id, episode_id),
        }
    }

    /// Runs and publishes a user turn. On any failure neither memory nor context changes.
    pub fn user_turn(&mut self, engine: &Engine, text: &str) -> Result<TurnOutcome> {
        let _turn = self.memory.lock_turns();
        let (u, b) = self.memory.current();
        let mut plan = engine.plan_turn(&u, &b, &self.context, text)?;
        self.memory.publish(&mut plan)?;
        self.context = plan.context;
        Ok(plan.outcome)
    }

    /// Records an utterance without generating a reply.
    pub fn observe(&mut self, engine: &Engine, speaker: Speaker, text: &str) -> Result<TurnOutcome> {
        let _turn = self.memory.lock_turns();
        let (u, b) = self.memory.current();
        let mut plan = engine.plan_observed(&u, &b, &self.context, speaker, text)?;
        self.memory.publish(&mut plan)?;
        self.context = plan.context;
        Ok(plan.outcome)
    }
}
